# tests/conftest.py
import os

import pytest

from app.domain.models import DispatchParams
from app.services.pipeline import StageContext
from app.services.scheduler import ExecutorKind
from app.services.sealvault import SealVault, generate_key, write_key_file
from app.services.synthetic import random_genome

# keep a developer's own SEALMAP_* environment out of the tests
for _name in [n for n in os.environ if n.startswith('SEALMAP_')]:
    del os.environ[_name]


@pytest.fixture()
def root_key():
    return generate_key()


@pytest.fixture()
def user_key():
    return generate_key()


@pytest.fixture()
def vault(root_key, user_key):
    return SealVault(root_key, user_key)


@pytest.fixture()
def key_files(tmp_path):
    """Root and user key files with 0600 permissions."""
    root = tmp_path / 'keys' / 'root.key'
    user = tmp_path / 'keys' / 'user.key'
    root.parent.mkdir()
    write_key_file(root)
    write_key_file(user)
    return root, user


@pytest.fixture()
def genome():
    return random_genome(20_000, seed=11, name='chrT')


@pytest.fixture()
def reference_file(tmp_path, genome):
    from app.domain.seqio import write_fasta

    path = tmp_path / 'ref.fa'
    path.write_bytes(write_fasta(genome.name, genome.sequence))
    return path


@pytest.fixture()
def make_context(tmp_path, reference_file, root_key, user_key):
    """StageContext factory over a small reference in a fresh work dir."""

    def _make(partitions=4, workdir=None, **overrides):
        fields = dict(
            workdir=workdir or tmp_path / f'work-p{partitions}',
            reference=reference_file,
            partitions=partitions,
            overlap=99,
            dispatch=DispatchParams(b=25, l=15, p=partitions),
            root_key=root_key,
            user_key=user_key,
        )
        fields.update(overrides)
        return StageContext(**fields)

    return _make


@pytest.fixture()
def thread_executor():
    return ExecutorKind.THREAD
