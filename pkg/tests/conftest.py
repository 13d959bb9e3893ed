import numpy as np
import pytest

from securefl.datasets import synthetic_regression, to_arrays
from securefl.detection import Box, DetectionRecord, kernels
from securefl.local import LinearRegression, LocalClient, TrainConfig
from securefl.partition import split_iid
from securefl.protocol import FederationConfig, run_federation
from securefl.transport import make_transport


@pytest.fixture(params=["python", "cython"])
def backend(request):
    """Each kernel implementation in turn; the compiled one skips when not built."""
    if request.param == "cython":
        if kernels.compiled_impl is None:
            pytest.skip("compiled kernels not built")
        return kernels.compiled_impl
    return kernels.python_impl


def regression_federation(m=5, n=200, rounds=30, epochs=5, batch=32, seed=0, server_fraction=0.0,
                          optimizer="fedavg", transport="inproc", mode="fedavg", capture=False, **fed):
    """Build and run a toy linear-regression federation; returns (result, transport, data)."""
    samples = synthetic_regression(n, 5, seed=seed)
    split = split_iid(samples, server_fraction, m, seed)
    by_id = {s.sample_id: s for s in samples}
    cfg = TrainConfig(epochs_per_round=epochs, batch_size=batch, rounds=rounds, warmup_epochs=0, mode=mode)
    net = LinearRegression(5)
    clients = []
    for c in range(m):
        X, y = to_arrays([by_id[i] for i in split.client_ids[c]], "regression")
        clients.append(LocalClient(c, net, X, y, cfg, seed=seed * 1000 + c))
    X_all, y_all = to_arrays(samples, "regression")
    fc = FederationConfig(m, cfg, optimizer=optimizer, seed=seed, **fed)
    t = make_transport(transport, m, capture=capture)
    result = run_federation(fc, t, net, clients, X_all, y_all)
    return result, t, (net, clients, X_all, y_all)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_fixture(rng, n_images=5, max_boxes=10, n_classes=3):
    """Random images as oracle tuples and as DetectionRecords.

    At most ``max_boxes`` boxes in total (ground truths plus predictions).
    Predictions are jittered copies of ground truths plus clutter; confidences
    come from a coarse grid so that ties occur.
    """
    budget = [max_boxes]

    def take():
        if budget[0] == 0:
            return False
        budget[0] -= 1
        return True

    images, records = [], []
    for img in range(n_images):
        gts = []
        for _ in range(int(rng.integers(0, 3))):
            if not take():
                break
            x, y = rng.uniform(0, 80, 2)
            w, h = rng.uniform(5, 30, 2)
            gts.append((x, y, x + w, y + h, int(rng.integers(n_classes))))
        preds = []
        for g in gts:
            for _ in range(int(rng.integers(0, 3))):
                if not take():
                    break
                j = rng.normal(0, 0.25 * (g[2] - g[0]), 4)
                x1, y1 = g[0] + j[0], g[1] + j[1]
                cls = g[4] if rng.random() < 0.8 else int(rng.integers(n_classes))
                preds.append((x1, y1, max(x1 + 1, g[2] + j[2]), max(y1 + 1, g[3] + j[3]),
                              cls, float(rng.integers(1, 11)) / 10))
        if rng.random() < 0.5 and take():
            x, y = rng.uniform(0, 90, 2)
            preds.append((x, y, x + 10, y + 10, int(rng.integers(n_classes)), float(rng.integers(1, 11)) / 10))
        images.append((preds, gts))
        records.append(DetectionRecord(
            f"img{img}",
            [Box(*p[:4], p[4], p[5]) for p in preds],
            [Box(*g[:4], g[4]) for g in gts],
        ))
    return images, records


# --- acceptance reporting ------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False, "notes": []})
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed or rep.skipped:
        entry["ok"] = False
    entry["notes"].extend(v for k, v in rep.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        verdict = "PASS" if e["ok"] and e["ran"] else "FAIL"
        notes = "; ".join(e["notes"])
        terminalreporter.write_line(f"criterion {n:2d} {verdict}: {e['title']}" + (f" [{notes}]" if notes else ""))
