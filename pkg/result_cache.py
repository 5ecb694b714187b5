import sqlite3
from pathlib import Path
from typing import Dict, Optional
from dataclasses import asdict
from datetime import datetime
import hashlib
import json

from config import Config
from simulator import DeviceTime, IterationProfile, SimReport, TraceRecord


def report_to_json(report: SimReport) -> str:
    return json.dumps(asdict(report), sort_keys=True)


def report_from_json(payload: str) -> SimReport:
    data = json.loads(payload)
    profile = data.pop("profile")
    profile["devices"] = tuple(DeviceTime(**d) for d in profile["devices"])
    data["profile"] = IterationProfile(**profile)
    data["trace"] = tuple(TraceRecord(**t) for t in data["trace"])
    return SimReport(**data)


class SimulationCache:
    """Stores simulated rows in SQLite, keyed by a digest of everything that shapes the result"""

    def __init__(self, db_file: str = None):
        """
        Initialize cache manager with SQLite

        Args:
            db_file: Path to SQLite database file (default: from Config.CACHE_DB_FILE)
        """
        if db_file is None:
            db_file = Config.CACHE_DB_FILE
        self.db_file = Path(db_file)
        self._init_database()

    def _init_database(self):
        """Create the table if it does not exist"""
        conn = sqlite3.connect(self.db_file)
        cursor = conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS simulated_rows (
                row_key TEXT PRIMARY KEY,
                name TEXT NOT NULL,
                scheme TEXT,
                simulated_at TEXT NOT NULL,
                report TEXT NOT NULL
            )
        """)
        cursor.execute("""
            CREATE INDEX IF NOT EXISTS idx_row_name
            ON simulated_rows(name)
        """)

        conn.commit()
        conn.close()

    @staticmethod
    def row_key(inputs: Dict) -> str:
        """
        Digest of a row's inputs

        Args:
            inputs: JSON-serialisable description of strategy, topology, costs and run length

        Returns:
            Hex SHA-256 of the canonical JSON
        """
        canonical = json.dumps(inputs, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canonical.encode()).hexdigest()

    def is_cached(self, key: str) -> bool:
        conn = sqlite3.connect(self.db_file)
        cursor = conn.cursor()
        cursor.execute("SELECT 1 FROM simulated_rows WHERE row_key = ?", (key,))
        result = cursor.fetchone()
        conn.close()

        return result is not None

    def get(self, key: str) -> Optional[SimReport]:
        """
        Get the cached report for a row

        Args:
            key: Row digest from row_key

        Returns:
            SimReport or None if not found
        """
        conn = sqlite3.connect(self.db_file)
        cursor = conn.cursor()
        cursor.execute("SELECT report FROM simulated_rows WHERE row_key = ?", (key,))
        row = cursor.fetchone()
        conn.close()

        if row:
            return report_from_json(row[0])
        return None

    def put(self, key: str, name: str, scheme: str, report: SimReport):
        """Add or replace a simulated row"""
        conn = sqlite3.connect(self.db_file)
        cursor = conn.cursor()
        cursor.execute("""
            REPLACE INTO simulated_rows (row_key, name, scheme, simulated_at, report)
            VALUES (?, ?, ?, ?, ?)
        """, (key, name, scheme, datetime.now().isoformat(), report_to_json(report)))
        conn.commit()
        conn.close()

    def get_cache_stats(self) -> Dict:
        """
        Get cache statistics

        Returns:
            Dict with the total row count and counts per scheme
        """
        conn = sqlite3.connect(self.db_file)
        cursor = conn.cursor()

        cursor.execute("SELECT COUNT(*) FROM simulated_rows")
        total = cursor.fetchone()[0]

        cursor.execute("SELECT scheme, COUNT(*) FROM simulated_rows GROUP BY scheme")
        by_scheme = dict(cursor.fetchall())

        conn.close()

        return {"total": total, "by_scheme": by_scheme}
