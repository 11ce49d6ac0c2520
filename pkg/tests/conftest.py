import numpy as np
import pytest

from cdt import model as M
from cdt.numerics import RngStream

# toy shapes used across the suite
TOY = dict(n_genes=4, dna_positions=8, d_dna=12, d_rna=6, d_protein=8, d=16, heads=2)


def toy_config(**overrides) -> M.ModelConfig:
    return M.ModelConfig(**{**TOY, **overrides})


def toy_inputs(seed: int, batch: int | None = None, cfg: M.ModelConfig | None = None):
    cfg = cfg or toy_config()
    rng = np.random.default_rng(seed)
    shape = (cfg.dna_positions, cfg.d_dna) if batch is None else (batch, cfg.dna_positions, cfg.d_dna)
    return (rng.normal(size=shape), rng.normal(size=(cfg.n_genes, cfg.d_rna)),
            rng.normal(size=(cfg.n_genes, cfg.d_protein)))


@pytest.fixture
def cfg():
    return toy_config()


@pytest.fixture
def params(cfg):
    return M.init_params(cfg, RngStream(0))


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_c" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        number = int(name[6:8])
        verdict = "PASS" if _ACCEPTANCE[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {name[9:]}")
