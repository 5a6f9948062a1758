import pytest
from threadpoolctl import threadpool_limits

from lungvol import phantom


@pytest.fixture(autouse=True, scope="session")
def _single_threaded_blas():
    # the vendored numpy/scipy OpenBLAS pools contend on small GEMMs; pinning
    # also removes any thread-count dependence from timing-sensitive tests
    with threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="session")
def micro_manifest(tmp_path_factory):
    """24 small phantoms at 64 px, split 16/4/4; shared by trainer and CLI tests."""
    out = tmp_path_factory.mktemp("micro_data")
    phantom.make_dataset(
        n=24, params=phantom.small_test_params(), noise=phantom.LabelNoiseModel("exact"),
        seed=71, out_dir=out, split_counts=(16, 4, 4), image_size=64,
    )
    return out / "manifest.csv"
