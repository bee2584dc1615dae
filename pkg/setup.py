from setuptools import setup, find_packages

setup(
    name="opo-pairs",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "examples", "examples.*"]),
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.8",
        "rich",
        "psutil",
    ],
    extras_require={
        'test': ["pytest>=7.0.0"],
    },
    entry_points={
        'console_scripts': [
            'opo-pairs=src.ui.pairs_cli:main',
            'opo-pump-series=src.scripts.run_pump_series:main',
        ],
    },
)
