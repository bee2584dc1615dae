#!/usr/bin/env python3
"""
Run Ledger - sqlite record of command-line runs and their results
"""

import json
import logging
import os
import random
import sqlite3
import time
from datetime import datetime
from typing import Any, Dict, List, Mapping, Optional

logger = logging.getLogger(__name__)


class RunLedger:
    """Records each CLI invocation (command, seed, config, exit code) and its results"""

    def __init__(self, db_path: str = "logs/runs.db"):
        self.db_path = db_path
        self._init_db()

    def _connect(self) -> sqlite3.Connection:
        return sqlite3.connect(self.db_path)

    def _init_db(self):
        """Create the tables on first use; existing ledgers are kept"""
        directory = os.path.dirname(self.db_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        conn = self._connect()
        cursor = conn.cursor()

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                run_id TEXT PRIMARY KEY,
                command TEXT NOT NULL,
                seed INTEGER,
                config TEXT,
                start_time DATETIME NOT NULL,
                end_time DATETIME,
                exit_code INTEGER
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS results (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL,
                key TEXT NOT NULL,
                value TEXT NOT NULL,
                FOREIGN KEY (run_id) REFERENCES runs(run_id)
            )
        ''')

        conn.commit()
        conn.close()

    def start_run(self, command: str, seed: Optional[int] = None, config: str = "") -> str:
        """Open a run row and return its id"""
        run_id = f"{command}_{int(time.time())}"
        try:
            self._insert_run(run_id, command, seed, config)
        except sqlite3.IntegrityError:
            # same command started within the same second
            run_id = f"{run_id}_{random.randint(1000, 9999)}"
            self._insert_run(run_id, command, seed, config)
        logger.debug("ledger run %s started", run_id)
        return run_id

    def _insert_run(self, run_id: str, command: str, seed: Optional[int], config: str):
        conn = self._connect()
        try:
            conn.execute('''
                INSERT INTO runs (run_id, command, seed, config, start_time)
                VALUES (?, ?, ?, ?, ?)
            ''', (run_id, command, seed, config, datetime.now().isoformat()))
            conn.commit()
        finally:
            conn.close()

    def end_run(self, run_id: str, exit_code: int):
        conn = self._connect()
        conn.execute('''
            UPDATE runs
            SET end_time = ?, exit_code = ?
            WHERE run_id = ?
        ''', (datetime.now().isoformat(), int(exit_code), run_id))
        conn.commit()
        conn.close()

    def log_results(self, run_id: str, values: Mapping[str, Any]):
        """Store result key/value pairs; floats keep full precision"""
        rows = [(run_id, key, repr(v) if isinstance(v, float) else str(v)) for key, v in values.items()]
        conn = self._connect()
        conn.executemany('''
            INSERT INTO results (run_id, key, value)
            VALUES (?, ?, ?)
        ''', rows)
        conn.commit()
        conn.close()

    def get_run(self, run_id: str) -> Optional[Dict[str, Any]]:
        conn = self._connect()
        cursor = conn.execute('SELECT * FROM runs WHERE run_id = ?', (run_id,))
        row = cursor.fetchone()
        columns = [c[0] for c in cursor.description]
        conn.close()
        return dict(zip(columns, row)) if row else None

    def get_results(self, run_id: str) -> Dict[str, str]:
        conn = self._connect()
        cursor = conn.execute('''
            SELECT key, value FROM results
            WHERE run_id = ?
            ORDER BY id
        ''', (run_id,))
        results = dict(cursor.fetchall())
        conn.close()
        return results

    def list_runs(self, limit: int = 20, command: Optional[str] = None) -> List[Dict[str, Any]]:
        """Most recent runs first"""
        conn = self._connect()
        if command:
            cursor = conn.execute('''
                SELECT * FROM runs WHERE command = ?
                ORDER BY start_time DESC LIMIT ?
            ''', (command, limit))
        else:
            cursor = conn.execute('''
                SELECT * FROM runs
                ORDER BY start_time DESC LIMIT ?
            ''', (limit,))
        columns = [c[0] for c in cursor.description]
        runs = [dict(zip(columns, row)) for row in cursor.fetchall()]
        conn.close()
        return runs

    def export_run(self, run_id: str, path: str) -> str:
        """Write one run and its results as JSON"""
        export_data = {
            'run': self.get_run(run_id),
            'results': self.get_results(run_id),
            'exported_at': datetime.now().isoformat(),
        }
        with open(path, 'w') as f:
            json.dump(export_data, f, indent=2)
        return path
