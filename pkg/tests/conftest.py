import warnings

# numba probes TBB at import; the probe warning is environment noise
warnings.filterwarnings("ignore", message=".*TBB.*", module="numba.*")


def pytest_configure(config):
    config.addinivalue_line(
        "filterwarnings", "ignore:.*TBB threading layer.*")
