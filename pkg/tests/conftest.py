"""
测试公共夹具

- 把项目根目录加入 sys.path，使 ``src`` 可以直接导入
- 64 位精度上下文
- 小规模运行配置和临时合成数据集
"""

import os
import sys

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from src.core import numerics as nx  # noqa: E402
from src.core.config import RunConfig  # noqa: E402
from src.core.manifest import load_manifest  # noqa: E402
from src.core.pseudolabel import label_manifest  # noqa: E402
from src.core.synth import SynthSpec, generate_dataset  # noqa: E402

TINY_SPEC = {"D_I": 8, "T": 8, "K_star": 2, "C": 3, "prototypes": 4,
             "eta": 0.3, "train": 8, "test": 4, "seed": 0, "L_q": 3}


@pytest.fixture
def float64():
    with nx.precision("float64"):
        yield


@pytest.fixture(autouse=True)
def _reset_precision():
    nx.set_precision("float32")
    yield
    nx.set_precision("float32")


@pytest.fixture
def tiny_config() -> RunConfig:
    return RunConfig().with_overrides({
        "T": 8, "K": 2, "D_I": 8, "D_G": 16, "N": 1, "heads": 4,
        "N_intra": 2, "N_inter": 2, "batch_size": 4, "epochs": 1,
        "n_p": 20, "lr": 1e-3,
    })


@pytest.fixture
def tiny_spec() -> SynthSpec:
    return SynthSpec.from_dict(TINY_SPEC)


@pytest.fixture
def tiny_dataset(tmp_path, tiny_spec):
    """已生成并打好伪标签（K=2）的小型合成数据集"""
    result = generate_dataset(tiny_spec, str(tmp_path / "data"), show_progress=False)
    for path in (result.train_manifest, result.test_manifest):
        label_manifest(load_manifest(path), 2, show_progress=False)
    return result
