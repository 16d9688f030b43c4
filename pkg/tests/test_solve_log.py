import sqlite3

import pytest

import solve_log
from solve_log import SolveRecord


def test_records_round_trip(tmp_path):
    conn = solve_log.connect(tmp_path / 'solves.db')
    try:
        run_id = solve_log.start_run(conn, 'eval', 'case9', 'abc')
        records = [SolveRecord(0, 'truncated', 'converged', 12, 13, 0.25, 5296.7, 0, 1),
                   SolveRecord(0, 'timing_full', 'converged', 14, 15, 0.5, None, 1),
                   SolveRecord(1, 'truncated', 'converged', 11, 12, 0.2, 5300.1)]
        assert solve_log.record_solves(conn, run_id, records) == 3
        assert solve_log.fetch_solves(conn, run_id, 'truncated') == [records[0], records[2]]
        assert len(solve_log.fetch_solves(conn, run_id)) == 3
    finally:
        conn.close()


def test_latest_run_is_per_case(tmp_path):
    conn = solve_log.connect(tmp_path / 'solves.db')
    try:
        first = solve_log.start_run(conn, 'gen-data', 'case9', 'h9')
        second = solve_log.start_run(conn, 'gen-data', 'case9', 'h9')
        solve_log.start_run(conn, 'gen-data', 'case39', 'h39')
        assert second > first
        assert solve_log.latest_run(conn, 'gen-data', 'h9') == second
        assert solve_log.latest_run(conn, 'eval', 'h9') is None
    finally:
        conn.close()


def test_old_ledger_gains_columns(tmp_path):
    path = tmp_path / 'old.db'
    conn = sqlite3.connect(path)
    conn.execute('CREATE TABLE Runs (run_id INTEGER PRIMARY KEY, kind TEXT NOT NULL, case_name TEXT NOT NULL, '
                 'case_hash TEXT NOT NULL, started_at TEXT NOT NULL)')
    conn.execute('CREATE TABLE Solves (solve_id INTEGER PRIMARY KEY, run_id INTEGER NOT NULL, '
                 'scenario INTEGER NOT NULL, role TEXT NOT NULL, status TEXT NOT NULL, '
                 'iterations INTEGER NOT NULL, feval_count INTEGER NOT NULL, wall_time REAL NOT NULL, '
                 'objective REAL)')
    conn.execute("INSERT INTO Runs VALUES (1, 'eval', 'case9', 'h', '2024-01-01T00:00:00+00:00')")
    conn.execute("INSERT INTO Solves VALUES (1, 1, 0, 'truncated', 'converged', 10, 11, 0.1, 100.0)")
    conn.commit()
    conn.close()

    conn = solve_log.connect(path)
    try:
        assert solve_log.column_exists(conn, 'Solves', 'repeat')
        assert solve_log.column_exists(conn, 'Solves', 'rounds')
        [old] = solve_log.fetch_solves(conn, 1)
        assert (old.repeat, old.rounds) == (0, 0)
    finally:
        conn.close()


def test_unknown_run_is_rejected(tmp_path):
    conn = solve_log.connect(tmp_path / 'solves.db')
    try:
        with pytest.raises(sqlite3.IntegrityError):
            solve_log.record_solves(conn, 42, [SolveRecord(0, 'full', 'converged', 1, 2, 0.1)])
    finally:
        conn.close()
