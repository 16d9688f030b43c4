import pytest
import requests

import fetch_case
from case_io import CaseSyntaxError, load_case
from conftest import DATA


class FakeResponse:
    def __init__(self, text: str, status: int = 200):
        self.text = text
        self.status_code = status

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f'{self.status_code} error')


class FakeSession:
    def __init__(self, pages: dict[str, FakeResponse]):
        self.pages = pages
        self.requested: list[str] = []
        self.closed = 0

    def get(self, url, timeout=None):
        self.requested.append(url)
        return self.pages.get(url, FakeResponse('', 404))

    def close(self):
        self.closed += 1


@pytest.fixture
def session(monkeypatch):
    fake = FakeSession({fetch_case.case_url('case2'): FakeResponse((DATA / 'case2.m').read_text())})
    monkeypatch.setattr(fetch_case, 'case_session', lambda: fake)
    return fake


def test_case_filename():
    assert fetch_case.case_filename('case39_epri') == 'pglib_opf_case39_epri.m'
    assert fetch_case.case_filename('pglib_opf_case39_epri.m') == 'pglib_opf_case39_epri.m'
    assert fetch_case.case_url('case39_epri').endswith('/master/pglib_opf_case39_epri.m')


def test_fetch_writes_validated_case(session, tmp_path):
    path = fetch_case.fetch_case('case2', tmp_path)
    assert path == tmp_path / 'pglib_opf_case2.m'
    assert load_case(path).nb == 2
    assert not list(tmp_path.glob('*.part'))


def test_existing_file_is_not_downloaded_again(session, tmp_path):
    fetch_case.fetch_case('case2', tmp_path)
    fetch_case.fetch_case('case2', tmp_path)
    assert len(session.requested) == 1
    fetch_case.fetch_case('case2', tmp_path, force=True)
    assert len(session.requested) == 2


def test_invalid_download_is_not_saved(monkeypatch, tmp_path):
    fake = FakeSession({fetch_case.case_url('case5'): FakeResponse('function mpc = x\nmpc.bus = [\n1 3 q;\n')})
    monkeypatch.setattr(fetch_case, 'case_session', lambda: fake)
    with pytest.raises(CaseSyntaxError):
        fetch_case.fetch_case('case5', tmp_path)
    assert not list(tmp_path.iterdir())


def test_fetch_cases_retries_and_reports_failures(session, tmp_path, capsys):
    fetched = fetch_case.fetch_cases(['case2', 'case_missing'], tmp_path)
    assert set(fetched) == {'case2'}
    out = capsys.readouterr().out
    assert 'retrying serially' in out
    assert 'Failed final fetch case_missing' in out
    assert session.requested.count(fetch_case.case_url('case_missing')) == 2


def test_case_session_honours_rate_limits():
    s = fetch_case.case_session()
    retry = s.get_adapter('https://raw.githubusercontent.com').max_retries
    assert retry.total == 4
    assert 429 in retry.status_forcelist and 503 in retry.status_forcelist
    assert retry.respect_retry_after_header
    assert s.headers['Accept'] == 'text/plain'
    assert s.headers['User-Agent'] == fetch_case.USER_AGENT


def test_owned_session_is_closed(session, tmp_path):
    fetch_case.fetch_case('case2', tmp_path)
    assert session.closed == 1


def test_given_session_is_left_open(tmp_path):
    fake = FakeSession({fetch_case.case_url('case2'): FakeResponse((DATA / 'case2.m').read_text())})
    fetch_case.fetch_case('case2', tmp_path, session=fake)
    assert fake.requested and fake.closed == 0


def test_main_force_downloads_again(session, tmp_path, capsys):
    assert fetch_case.main(['case2', '--dest', str(tmp_path)]) == 0
    assert fetch_case.main(['case2', '--dest', str(tmp_path), '--force']) == 0
    assert len(session.requested) == 2
    assert 'Done. 1/1 cases' in capsys.readouterr().out
