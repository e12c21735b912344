import pytest

from qfcap.config import Config


def tiny_config(**over) -> Config:
    """Small widths and a handful of steps: exercises every code path in seconds."""
    base = {
        "model.width": 32, "model.lm_width": 32, "model.image_queries": 4, "model.video_queries": 5,
        "model.text_queries": 5, "model.qformer_layers": 1, "model.image_qformer_layers": 1,
        "model.text_layers": 1, "model.lm_layers": 1,
        "lm_pretrain.steps": 20, "lm_pretrain.batch_size": 8,
        "stage1.steps": 4, "stage1.batch_size": 4, "stage1.warmup": 2,
        "stage2.steps": 4, "stage2.batch_size": 4, "stage2.warmup": 2,
        "stage3.steps": 3, "stage3.batch_size": 4, "stage3.warmup": 2,
        "scst.steps": 2, "scst.batch_size": 4, "caption_max_len": 8,
    }
    base.update(over)
    return Config().with_overrides(base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
