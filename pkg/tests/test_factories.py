import pytest

import app.factories as fx
from app.adapters.aligner.external import ExternalAligner
from app.adapters.aligner.seed_extend import SeedExtendAligner
from app.domain.errors import ConfigError, MissingRoot
from app.services.cost_model import EnclaveProfile
from app.services.scheduler import ExecutorKind
from app.settings import Settings, load_settings


def stub_settings(monkeypatch, tmp_path, **overrides):
    """Replace app.factories.settings with settings rooted in tmp_path."""
    defaults = dict(
        WORKDIR=tmp_path / 'work',
        ROOT_KEY_FILE=tmp_path / 'keys' / 'root.key',
        USER_KEY_FILE=tmp_path / 'keys' / 'user.key',
    )

    # let overrides replace defaults cleanly
    merged = {**defaults, **overrides}

    loaded = Settings(_env_file=None, **merged)
    monkeypatch.setattr('app.factories.settings', loaded)
    return loaded


def test_scoring_from_settings(monkeypatch, tmp_path):
    stub_settings(monkeypatch, tmp_path, MATCH=2, MISMATCH=-3, BAND_WIDTH=8)
    scoring = fx.make_scoring()
    assert (scoring.match, scoring.mismatch, scoring.band_width) == (2, -3, 8)


def test_invalid_scoring_is_a_config_error(monkeypatch, tmp_path):
    stub_settings(monkeypatch, tmp_path, MATCH=0)
    with pytest.raises(ConfigError) as e:
        fx.make_scoring()
    assert e.value.stage == 'align'


def test_dispatch_params(monkeypatch, tmp_path):
    stub_settings(monkeypatch, tmp_path, BMER=31, BMER_OVERLAP=21, PARTITIONS=6)
    params = fx.make_dispatch_params()
    assert (params.b, params.l, params.p, params.stride) == (31, 21, 6, 10)
    assert fx.make_dispatch_params(3).p == 3


def test_bmer_overlap_must_be_shorter(monkeypatch, tmp_path):
    stub_settings(monkeypatch, tmp_path, BMER=20, BMER_OVERLAP=20)
    with pytest.raises(ConfigError):
        fx.make_dispatch_params()


def test_builtin_aligner_by_default(monkeypatch, tmp_path):
    stub_settings(monkeypatch, tmp_path)
    assert isinstance(fx.make_aligner(), SeedExtendAligner)


def test_external_aligner_needs_a_command(monkeypatch, tmp_path):
    stub_settings(monkeypatch, tmp_path, ALIGNER='external')
    with pytest.raises(ConfigError):
        fx.make_aligner()
    cmd = 'bwa mem {reference} {reads}'
    stub_settings(monkeypatch, tmp_path, ALIGNER='external', ALIGNER_CMD=cmd)
    assert isinstance(fx.make_aligner(), ExternalAligner)


def test_profile_defaults_and_file(monkeypatch, tmp_path):
    stub_settings(monkeypatch, tmp_path)
    assert fx.make_profile() == EnclaveProfile()
    profile_file = tmp_path / 'enclave.env'
    profile_file.write_text('heap_mb=512\n')
    stub_settings(monkeypatch, tmp_path, PROFILE_FILE=profile_file)
    assert fx.make_profile().heap_mb == 512


def test_executor_kind(monkeypatch, tmp_path):
    stub_settings(monkeypatch, tmp_path, EXECUTOR='thread')
    assert fx.make_executor_kind() is ExecutorKind.THREAD


def test_missing_root_key(monkeypatch, tmp_path):
    stub_settings(monkeypatch, tmp_path)
    with pytest.raises(MissingRoot) as e:
        fx.make_vault()
    assert e.value.path.endswith('root.key')


def test_missing_user_key(monkeypatch, tmp_path, key_files):
    root, _ = key_files
    missing = tmp_path / 'none.key'
    stub_settings(monkeypatch, tmp_path, ROOT_KEY_FILE=root, USER_KEY_FILE=missing)
    with pytest.raises(ConfigError):
        fx.load_keys()


def test_vault_from_key_files(monkeypatch, tmp_path, key_files):
    root, user = key_files
    stub_settings(
        monkeypatch,
        tmp_path,
        ROOT_KEY_FILE=root,
        USER_KEY_FILE=user,
        SEAL_CHUNK_SIZE=4096,
    )
    vault = fx.make_vault()
    assert vault.root == root.read_bytes()
    assert vault.chunk_size == 4096


def test_stage_context(monkeypatch, tmp_path, key_files, reference_file):
    root, user = key_files
    stub_settings(
        monkeypatch,
        tmp_path,
        ROOT_KEY_FILE=root,
        USER_KEY_FILE=user,
        PARTITIONS=4,
        READ_LENGTH=150,
        SEED_LEN=20,
    )
    ctx = fx.make_stage_context(reference_file)
    assert ctx.partitions == 4
    assert ctx.overlap == 149
    assert ctx.dispatch.p == 4
    assert ctx.seed_length == 20
    assert ctx.workdir == tmp_path / 'work'
    assert ctx.root_key == root.read_bytes()
    assert 'root_key' not in repr(ctx)


def test_stage_context_without_keys(monkeypatch, tmp_path, reference_file):
    stub_settings(monkeypatch, tmp_path, OVERLAP=50)
    ctx = fx.make_stage_context(reference_file, partitions=2, with_keys=False)
    assert ctx.root_key is None
    assert ctx.overlap == 50
    assert ctx.partitions == 2


def test_configure_swaps_settings(monkeypatch, tmp_path):
    monkeypatch.setattr(fx, 'settings', fx.settings)
    loaded = Settings(_env_file=None, PARTITIONS=3)
    assert fx.configure(loaded) is loaded
    assert fx.make_dispatch_params().p == 3


# ----- settings loading -----
def test_flags_beat_environment_beat_config_file(monkeypatch, tmp_path):
    config = tmp_path / 'sealmap.env'
    config.write_text('SEALMAP_PARTITIONS=3\nSEALMAP_BMER=30\nSEALMAP_SEED_LEN=18\n')
    monkeypatch.setenv('SEALMAP_BMER', '27')
    loaded = load_settings(config, SEED_LEN=12, PARTITIONS=None)
    assert loaded.PARTITIONS == 3
    assert loaded.BMER == 27
    assert loaded.SEED_LEN == 12


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_settings(tmp_path / 'nope.env')


def test_invalid_setting_value(monkeypatch):
    monkeypatch.setenv('SEALMAP_PARTITIONS', 'many')
    with pytest.raises(ConfigError):
        load_settings()


@pytest.mark.parametrize(
    'name, value',
    [
        ('BLOOM_HASHES', 0),
        ('BLOOM_BITS', 0),
        ('PARTITIONS', 0),
        ('OVERLAP', -1),
        ('SEED_LEN', 0),
        ('SECURE_WORKERS', 0),
        ('ALIGNER_TIMEOUT_S', 0),
        ('LOG_LEVEL', 'loud'),
    ],
)
def test_out_of_range_setting(name, value):
    with pytest.raises(ConfigError) as e:
        load_settings(**{name: value})
    assert name in e.value.message


def test_blank_optional_values(monkeypatch):
    monkeypatch.setenv('SEALMAP_OVERLAP', '')
    monkeypatch.setenv('SEALMAP_LOG_LEVEL', 'debug')
    loaded = load_settings()
    assert loaded.OVERLAP is None
    assert loaded.effective_overlap == 99
    assert loaded.LOG_LEVEL == 'DEBUG'


def test_show_lists_every_setting():
    shown = Settings(_env_file=None).show().splitlines()
    assert 'PARTITIONS=8' in shown
    assert 'EXECUTOR=process' in shown
    assert 'OVERLAP=' in shown
    assert len(shown) == len(Settings.model_fields)
