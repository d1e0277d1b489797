from s2me.utils import NATIVE_THREAD_VARS, limit_native_threads, thread_budget


def test_thread_budget_reads_the_environment(monkeypatch):
    monkeypatch.setenv("S2ME_THREADS", "3")
    assert thread_budget() == 3
    monkeypatch.setenv("S2ME_THREADS", "many")
    assert thread_budget() == 1
    monkeypatch.delenv("S2ME_THREADS")
    assert thread_budget() == 1


def test_native_threads_follow_the_budget(monkeypatch):
    monkeypatch.setenv("S2ME_THREADS", "3")
    environ = {"MKL_NUM_THREADS": "8"}
    assert limit_native_threads(environ) == 3
    assert environ == {"OMP_NUM_THREADS": "3", "OPENBLAS_NUM_THREADS": "3", "MKL_NUM_THREADS": "8"}
    assert set(NATIVE_THREAD_VARS) <= set(environ)


def test_cli_module_caps_native_threads(monkeypatch):
    import importlib
    import os

    import s2me.__main__ as entry

    monkeypatch.setenv("S2ME_THREADS", "2")
    for name in NATIVE_THREAD_VARS:
        monkeypatch.delenv(name, raising=False)
    importlib.reload(entry)
    assert [os.environ[name] for name in NATIVE_THREAD_VARS] == ["2", "2", "2"]
