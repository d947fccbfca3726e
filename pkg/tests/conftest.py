import pytest

from vitlat.archspace import (
    ATTENTION, GELU, LAYERNORM, SEPCONV, ArchConfig, AttentionParams, BlockConfig, SepConvParams,
    sample_arch,
)
from vitlat.opgraph import lower

# (embedding_dim, mlp_ratio) that sit inside every stage's range when stage >= 4
_LATE = {4: (192, 2), 5: (384, 2), 6: (512, 2)}


def attention_block(i, dim, heads=4, sr=1, mlp=2, norm=LAYERNORM, act=GELU):
    return BlockConfig(i, dim, ATTENTION, norm, act, mlp, attention=AttentionParams(heads, sr))


def sepconv_block(i, dim, kernel=3, expansion=2, mlp=2, norm=LAYERNORM, act=GELU):
    return BlockConfig(i, dim, SEPCONV, norm, act, mlp, sepconv=SepConvParams(kernel, expansion))


def make_arch(mixers, size=224, merge_k=4):
    """Valid config for merge_k=4 with stages 4..6 using the given mixer names."""
    blocks = []
    for i, m in zip(range(merge_k, 7), mixers):
        dim, mlp = _LATE[i]
        blocks.append(attention_block(i, dim, mlp=mlp) if m == ATTENTION else sepconv_block(i, dim, mlp=mlp))
    return ArchConfig(size, size, merge_k, tuple(blocks))


@pytest.fixture(scope="session")
def small_graphs():
    return [lower(sample_arch(s)) for s in range(40)]


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
