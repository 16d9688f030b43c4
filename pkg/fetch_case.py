import argparse
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path

import requests
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

from case_io import parse_case

PGLIB_BASE = 'https://raw.githubusercontent.com/power-grid-lib/pglib-opf/master/'
USER_AGENT = 'acopf-screen case fetcher'

DATA_DIR = 'data'


def case_url(name: str) -> str:
    return PGLIB_BASE.rstrip('/') + '/' + case_filename(name)


def case_filename(name: str) -> str:
    stem = name[:-2] if name.endswith('.m') else name
    if not stem.startswith('pglib_opf_'):
        stem = f'pglib_opf_{stem}'
    return stem + '.m'


def case_session() -> requests.Session:
    """HTTPS session for raw case files; GitHub rate limits (429) are retried after Retry-After."""
    retry = Retry(
        total=4,
        connect=3,
        read=2,
        backoff_factor=1.0,
        status_forcelist=(429, 500, 502, 503, 504),
        allowed_methods=frozenset(['GET', 'HEAD']),
        respect_retry_after_header=True,
        raise_on_status=False,
    )
    s = requests.Session()
    s.mount('https://', HTTPAdapter(max_retries=retry))
    s.headers.update({'User-Agent': USER_AGENT, 'Accept': 'text/plain'})
    return s


def fetch_case(name: str, dest_dir: str | os.PathLike = DATA_DIR, force: bool = False,
               session: requests.Session | None = None) -> Path:
    """Download a PGLib-OPF case into dest_dir, validating it before it is written."""
    dest = Path(dest_dir) / case_filename(name)
    if dest.exists() and not force:
        print(f"{dest} already present; skipping download")
        return dest
    own = session is None
    session = session or case_session()
    try:
        resp = session.get(case_url(name), timeout=(10, 60))
    finally:
        if own:
            session.close()
    resp.raise_for_status()
    text = resp.text
    case = parse_case(text, 'matpower', name=dest.stem)
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_suffix('.m.part')
    tmp.write_text(text, encoding='utf-8')
    tmp.replace(dest)
    print(f"Saved {dest} ({case.nb} buses, {case.nl} branches, {case.ng} generators)")
    return dest


def fetch_cases(names: list[str], dest_dir: str | os.PathLike = DATA_DIR, force: bool = False) -> dict[str, Path]:
    results: dict[str, Path] = {}
    errors: list[tuple[str, str]] = []
    with ThreadPoolExecutor(max_workers=min(4, len(names) or 1)) as exe:
        futs = {exe.submit(fetch_case, name, dest_dir, force): name for name in names}
        for fut in as_completed(futs):
            name = futs[fut]
            try:
                results[name] = fut.result()
            except Exception as e:
                errors.append((name, str(e)))

    if errors:
        print(f"{len(errors)} errors during fetch; retrying serially...")
        for name, _ in errors:
            try:
                results[name] = fetch_case(name, dest_dir, force)
            except Exception as e:
                print(f"Failed final fetch {name} -> {e}")
    return results


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description='Download PGLib-OPF cases')
    parser.add_argument('names', nargs='*', default=['case39_epri'])
    parser.add_argument('--dest', default=DATA_DIR)
    parser.add_argument('--force', action='store_true', help='download even if the file exists')
    args = parser.parse_args(argv)
    fetched = fetch_cases(args.names, args.dest, args.force)
    print(f"Done. {len(fetched)}/{len(args.names)} cases available in {args.dest}/")
    return 0 if len(fetched) == len(args.names) else 1


if __name__ == '__main__':
    raise SystemExit(main())
