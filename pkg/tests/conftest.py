import hashlib
import os
from pathlib import Path

import pytest
import torch

from aptbench.attack import Fixtures
from aptbench.config import ModelConfig, RunConfig
from aptbench.experiments import ingest_data, pretrain_all
from aptbench.models import ClassifierHandle, DiscriminatorSet, Generator, ImageClassifier, freeze
from aptbench.workspace import Workspace

ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src" / "aptbench"

MICRO = ModelConfig(
    img_size=4,
    crop_size=4,
    num_classes=3,
    z_dim=3,
    style_dim=4,
    mapping_hidden=6,
    layers=((4, 3), (4, 2)),
    d_channels=3,
    num_d_scales=2,
    perceptual_channels=(3, 4),
)


def source_digest(*names: str) -> str:
    h = hashlib.sha256()
    for n in sorted(names):
        h.update((SRC / n).read_bytes())
    return h.hexdigest()[:12]


def cache_root() -> Path:
    return Path(os.environ.get("APTBENCH_TEST_CACHE", ROOT / ".cache"))


def micro_fixtures(seed: int = 0, dtype=torch.float64, classifier_ids=("target",)) -> Fixtures:
    """Randomly initialized micro models (no training) in ``dtype``."""
    torch.manual_seed(seed)
    G = freeze(Generator(MICRO).to(dtype))
    with torch.no_grad():
        for name, p in G.synthesis.named_parameters():
            if name.endswith("noise_strength"):
                p.fill_(0.1)
    D = freeze(DiscriminatorSet(MICRO).to(dtype))
    pnet = freeze(ImageClassifier(MICRO, "perceptual").to(dtype))
    zoo = {cid: ClassifierHandle(cid, "conv", freeze(ImageClassifier(MICRO, "conv").to(dtype))) for cid in classifier_ids}
    return Fixtures(G, D, pnet, zoo)


@pytest.fixture
def micro():
    return micro_fixtures()


@pytest.fixture(scope="session")
def trained_home() -> Workspace:
    """Workspace with the dataset and all pretrained fixtures.

    Cached on disk, keyed by the sources that determine the trained weights.
    """
    key = source_digest("config.py", "data.py", "models.py", "pretrain.py", "experiments.py")
    ws = Workspace(cache_root() / f"fixtures-{key}")
    cfg = RunConfig()
    ingest_data(ws, cfg)
    pretrain_all(ws, cfg)
    return ws


def linked_workspace(base: Workspace, path: Path) -> Workspace:
    """Fresh workspace that shares ``base``'s dataset and checkpoints."""
    path.mkdir(parents=True, exist_ok=True)
    if not (path / "data").exists():
        (path / "data").symlink_to((base.home / "data").resolve(), target_is_directory=True)
    (path / "checkpoints").mkdir(exist_ok=True)
    for ck in (base.home / "checkpoints").glob("*.npz"):
        link = path / "checkpoints" / ck.name
        if not link.exists():
            link.symlink_to(ck.resolve())
    return Workspace(path)


# ---------------------------------------------------------------------------
# acceptance verdicts: one PASS/FAIL line per criterion in the terminal summary

VERDICTS: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "call" or rep.failed:
        num, title = mark.args
        detail = dict(item.user_properties).get("detail", "")
        if rep.failed and not detail:
            detail = str(call.excinfo.value).splitlines()[0][:200] if call.excinfo else ""
        VERDICTS[num] = {"title": title, "passed": rep.passed, "detail": detail}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(VERDICTS):
        v = VERDICTS[num]
        status = "PASS" if v["passed"] else "FAIL"
        line = f"{status}  {num:2d}  {v['title']}"
        terminalreporter.write_line(line + (f"  [{v['detail']}]" if v["detail"] else ""))
