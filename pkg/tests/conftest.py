import numpy as np
import pytest
import torch

from aliaug.data_model import GOOD_LABEL, PROMPT_VOCAB, Pairing, Prompt, SampleRecord, kind_prompt

torch.set_num_threads(1)


def make_record(rec_id="r0", size=16, kind="scratch", seed=0, pairing=Pairing.PAIRED):
    rng = np.random.default_rng(seed)
    clean = rng.random((size, size, 3)).astype(np.float32)
    mask = np.zeros((size, size), np.float32)
    mask[size // 4: size // 2, size // 4: size // 2] = 1.0
    if kind == GOOD_LABEL:
        mask[:] = 0.0
    target = clean.copy()
    target[mask > 0] = 0.1
    text = PROMPT_VOCAB[0] if kind == GOOD_LABEL else kind_prompt(kind)
    return SampleRecord(
        id=rec_id, mask=mask, prompt=Prompt.from_text(text), label=kind,
        pairing=pairing, input_image=None if pairing is Pairing.MASK_ONLY else clean,
        target_image=target,
    )


@pytest.fixture
def record():
    return make_record()


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
