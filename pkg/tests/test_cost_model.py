import pytest

from app.domain.errors import ConfigError
from app.services.cost_model import (
    EnclaveProfile,
    call_time,
    compute_time,
    init_time,
    io_ocalls,
    load_profile,
    model_secure_overhead,
    paging_factor,
)

PROFILE = EnclaveProfile()


def test_one_million_ocalls():
    assert call_time(PROFILE, 0, 1_000_000) == pytest.approx(5.27)


def test_one_million_ecalls():
    assert call_time(PROFILE, 1_000_000, 0) == pytest.approx(4.65)


def test_init_scales_with_heap():
    assert init_time(PROFILE, 1024) == pytest.approx(40.96)
    assert init_time(PROFILE, 0) == 0


def test_paging_is_a_step_at_the_usable_epc():
    assert compute_time(PROFILE, 90, 1.0) == pytest.approx(1.0)
    assert compute_time(PROFILE, 95, 1.0) == pytest.approx(100.0)
    assert paging_factor(PROFILE, 90.01) == 100
    assert paging_factor(PROFILE, 10) == 1


def test_overhead_sums_the_parts():
    total = model_secure_overhead(PROFILE, 1024, 1_000_000, 1_000_000, 50, 2.0)
    assert total == pytest.approx(40.96 + 4.65 + 5.27 + 2.0)


def test_io_ocalls_rounds_up_to_pages():
    assert io_ocalls(0) == 0
    assert io_ocalls(1) == 1
    assert io_ocalls(4096) == 1
    assert io_ocalls(4097) == 2


def test_load_profile(tmp_path):
    path = tmp_path / 'enclave.env'
    path.write_text('HEAP_MB=256\nOCALL_COST=6.0\n# a comment\n')
    profile = load_profile(path)
    assert profile.heap_mb == 256
    assert profile.ocall_cost == 6.0
    assert profile.ecall_cost == PROFILE.ecall_cost


def test_load_profile_rejects_unknown_keys(tmp_path):
    path = tmp_path / 'enclave.env'
    path.write_text('heap_mb=256\nturbo=1\n')
    with pytest.raises(ConfigError) as e:
        load_profile(path)
    assert 'turbo' in e.value.message


def test_load_profile_rejects_bad_values(tmp_path):
    path = tmp_path / 'enclave.env'
    path.write_text('paging_slowdown=0.5\n')
    with pytest.raises(ConfigError):
        load_profile(path)


def test_load_profile_missing(tmp_path):
    with pytest.raises(ConfigError):
        load_profile(tmp_path / 'nope.env')
