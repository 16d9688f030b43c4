import os
import sqlite3
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable

LEDGER_PATH = 'solves.db'


@dataclass(frozen=True)
class SolveRecord:
    scenario: int
    role: str  # dataset, full, truncated
    status: str
    iterations: int
    feval_count: int
    wall_time: float
    objective: float | None = None
    repeat: int = 0
    rounds: int = 0


def column_exists(conn: sqlite3.Connection, table: str, column: str) -> bool:
    cur = conn.cursor()
    cur.execute(f"PRAGMA table_info({table})")
    return any(row[1] == column for row in cur.fetchall())


def ensure_tables(conn: sqlite3.Connection) -> None:
    cur = conn.cursor()
    cur.execute('PRAGMA journal_mode=WAL')
    cur.execute('PRAGMA synchronous=NORMAL')
    cur.execute('PRAGMA foreign_keys=ON')

    cur.execute('''
    CREATE TABLE IF NOT EXISTS Runs (
        run_id INTEGER PRIMARY KEY,
        kind TEXT NOT NULL,
        case_name TEXT NOT NULL,
        case_hash TEXT NOT NULL,
        started_at TEXT NOT NULL
    )''')
    cur.execute('''
    CREATE TABLE IF NOT EXISTS Solves (
        solve_id INTEGER PRIMARY KEY,
        run_id INTEGER NOT NULL,
        scenario INTEGER NOT NULL,
        role TEXT NOT NULL,
        status TEXT NOT NULL,
        iterations INTEGER NOT NULL,
        feval_count INTEGER NOT NULL,
        wall_time REAL NOT NULL,
        objective REAL,
        FOREIGN KEY (run_id) REFERENCES Runs(run_id)
    )''')
    # Ledgers written before repeated timing and fallback tracking lack these
    if not column_exists(conn, 'Solves', 'repeat'):
        cur.execute('ALTER TABLE Solves ADD COLUMN repeat INTEGER NOT NULL DEFAULT 0')
    if not column_exists(conn, 'Solves', 'rounds'):
        cur.execute('ALTER TABLE Solves ADD COLUMN rounds INTEGER NOT NULL DEFAULT 0')
    cur.execute('CREATE INDEX IF NOT EXISTS idx_solves_run ON Solves(run_id, role)')
    conn.commit()


def connect(path: str | os.PathLike = LEDGER_PATH) -> sqlite3.Connection:
    conn = sqlite3.connect(os.fspath(path))
    ensure_tables(conn)
    return conn


def start_run(conn: sqlite3.Connection, kind: str, case_name: str, case_hash: str) -> int:
    cur = conn.cursor()
    cur.execute('INSERT INTO Runs (kind, case_name, case_hash, started_at) VALUES (?, ?, ?, ?)',
                (kind, case_name, case_hash, datetime.now(timezone.utc).isoformat(timespec='seconds')))
    conn.commit()
    return int(cur.lastrowid)


def record_solves(conn: sqlite3.Connection, run_id: int, records: Iterable[SolveRecord]) -> int:
    cur = conn.cursor()
    n = 0
    for r in records:
        cur.execute('''
            INSERT INTO Solves (
                run_id, scenario, role, status, iterations, feval_count, wall_time, objective, repeat, rounds
            ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        ''', (run_id, r.scenario, r.role, r.status, r.iterations, r.feval_count,
              r.wall_time, r.objective, r.repeat, r.rounds))
        n += 1
    conn.commit()
    return n


def fetch_solves(conn: sqlite3.Connection, run_id: int, role: str | None = None) -> list[SolveRecord]:
    cur = conn.cursor()
    query = '''
        SELECT scenario, role, status, iterations, feval_count, wall_time, objective, repeat, rounds
        FROM Solves WHERE run_id = ?'''
    params: tuple = (run_id,)
    if role is not None:
        query += ' AND role = ?'
        params += (role,)
    cur.execute(query + ' ORDER BY scenario, role, repeat', params)
    return [SolveRecord(*row) for row in cur.fetchall()]


def latest_run(conn: sqlite3.Connection, kind: str, case_hash: str) -> int | None:
    cur = conn.cursor()
    cur.execute('SELECT MAX(run_id) FROM Runs WHERE kind = ? AND case_hash = ?', (kind, case_hash))
    row = cur.fetchone()
    return None if row is None or row[0] is None else int(row[0])
