"""``sealmap`` command line.

Subcommands: prepare, run, bench, seal, unseal, keygen, config. Flags
override environment (``SEALMAP_*``), which overrides ``--config``, which
overrides built-in defaults.
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import app.factories as fx
from app.domain.errors import ConfigError, DomainError
from app.domain.seqio import write_fasta, write_fastq
from app.services.bench import run_bench, seal_timing, write_bench_csv
from app.services.pipeline import (
    PipelineResult,
    StageContext,
    prepare,
    read_final,
    run_pipeline,
)
from app.services.sealvault import (
    KeyPolicy,
    enclave_measure,
    signer_id_for,
    write_key_file,
)
from app.services.synthetic import plant_reads, random_genome, reads_of
from app.settings import Settings, load_settings

logger = logging.getLogger(__name__)

# flag dest -> settings field
_OVERRIDES = {
    'workdir': 'WORKDIR',
    'partitions': 'PARTITIONS',
    'overlap': 'OVERLAP',
    'bmer': 'BMER',
    'bmer_overlap': 'BMER_OVERLAP',
    'seed_len': 'SEED_LEN',
    'bloom_bits': 'BLOOM_BITS',
    'bloom_hashes': 'BLOOM_HASHES',
    'secure_workers': 'SECURE_WORKERS',
    'nonsecure_workers': 'NONSECURE_WORKERS',
    'executor': 'EXECUTOR',
    'profile': 'PROFILE_FILE',
    'aligner': 'ALIGNER',
    'aligner_cmd': 'ALIGNER_CMD',
    'log_level': 'LOG_LEVEL',
}


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', type=Path, help='key=value settings file')
    parser.add_argument('--workdir', type=Path)
    parser.add_argument('--log-level', dest='log_level')


def _reference_flags(parser: argparse.ArgumentParser, *, required: bool) -> None:
    parser.add_argument('--ref', type=Path, required=required)
    parser.add_argument('--overlap', type=int)
    parser.add_argument('--bmer', type=int)
    parser.add_argument('--bmer-overlap', dest='bmer_overlap', type=int)
    parser.add_argument('--seed-len', dest='seed_len', type=int)
    parser.add_argument('--bloom-bits', dest='bloom_bits', type=int)
    parser.add_argument('--bloom-hashes', dest='bloom_hashes', type=int)


def _execution_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--secure-workers', dest='secure_workers', type=int)
    parser.add_argument('--nonsecure-workers', dest='nonsecure_workers', type=int)
    parser.add_argument('--executor', choices=['process', 'thread'])
    parser.add_argument('--profile', type=Path, help='enclave profile (key=value)')
    parser.add_argument('--aligner', choices=['builtin', 'external'])
    parser.add_argument('--aligner-cmd', dest='aligner_cmd')


def _partition_list(value: str) -> List[int]:
    try:
        parts = [int(v) for v in value.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'not a list of integers: {value!r}')
    if not parts or any(p < 1 for p in parts):
        raise argparse.ArgumentTypeError('partition list must hold positive integers')
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='sealmap',
        description='Privacy-preserving partitioned read mapping.',
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('prepare', help='partition, index and filter the reference')
    _common(p)
    _reference_flags(p, required=True)
    p.add_argument('--partitions', type=int)
    p.set_defaults(handler=cmd_prepare)

    p = sub.add_parser('run', help='run the whole pipeline')
    _common(p)
    _reference_flags(p, required=True)
    _execution_flags(p)
    p.add_argument('--reads', required=True, help='reads.fq or reads_1.fq,reads_2.fq')
    p.add_argument('--partitions', type=int)
    p.add_argument(
        '--report', type=Path, help='report CSV (default: <workdir>/report.csv)'
    )
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser('bench', help='partition-count benchmark')
    _common(p)
    _reference_flags(p, required=False)
    _execution_flags(p)
    p.add_argument('--reads', help='reads.fq (synthetic reads when omitted)')
    p.add_argument(
        '--partitions',
        type=_partition_list,
        default=[1, 4, 8],
        help='comma separated partition counts',
    )
    p.add_argument(
        '--insecure-baseline',
        dest='insecure_baseline',
        action='store_true',
        help='measure runs without the enclave cost model',
    )
    p.add_argument('--out', type=Path, default=Path('bench.csv'))
    p.set_defaults(handler=cmd_bench)

    for name, handler in (('seal', cmd_seal), ('unseal', cmd_unseal)):
        p = sub.add_parser(name, help=f'{name} a file')
        _common(p)
        p.add_argument('--in', dest='source', type=Path, required=True)
        p.add_argument('--out', dest='target', type=Path, required=True)
        p.add_argument(
            '--policy',
            default='user',
            help='user | signer | enclave:<module>',
        )
        p.set_defaults(handler=handler)

    p = sub.add_parser('keygen', help='create the root and user key files')
    _common(p)
    p.add_argument('--force', action='store_true', help='replace existing key files')
    p.set_defaults(handler=cmd_keygen)

    p = sub.add_parser('config', help='print effective settings')
    _common(p)
    p.add_argument('--show', action='store_true')
    p.set_defaults(handler=cmd_config)
    return parser


def settings_from(args: argparse.Namespace) -> Settings:
    overrides: Dict[str, object] = {}
    for dest, field in _OVERRIDES.items():
        value = getattr(args, dest, None)
        # bench takes a partition list, not a single count
        if dest == 'partitions' and isinstance(value, list):
            continue
        overrides[field] = value
    return load_settings(getattr(args, 'config', None), **overrides)


def _split_reads(value: str) -> Tuple[Path, Optional[Path]]:
    parts = [v for v in value.split(',') if v]
    if len(parts) not in (1, 2):
        raise ConfigError(f'--reads takes one or two files, got {value!r}')
    return Path(parts[0]), Path(parts[1]) if len(parts) == 2 else None


def _policy(value: str, settings: Settings) -> KeyPolicy:
    if value == 'user':
        return KeyPolicy.user_key()
    if value == 'signer':
        return KeyPolicy.signing_identity(
            signer_id_for(settings.SIGNER_NAME), settings.SIGNER_VERSION
        )
    if value.startswith('enclave:'):
        return KeyPolicy.enclave_identity(enclave_measure(value.split(':', 1)[1]))
    raise ConfigError(
        f'unknown policy {value!r}, expected user, signer or enclave:<module>'
    )


# ----- subcommands -----
def cmd_prepare(args: argparse.Namespace, settings: Settings) -> int:
    ctx = fx.make_stage_context(args.ref, with_keys=False)
    for stage, state in prepare(ctx).items():
        print(f'{stage}\t{state}')
    return 0


def _run(
    ctx: StageContext,
    settings: Settings,
    reads: Path,
    mates: Optional[Path],
    report: Optional[Path],
    *,
    secure: bool = True,
) -> PipelineResult:
    return asyncio.run(
        run_pipeline(
            ctx,
            reads,
            mates,
            secure_workers=settings.SECURE_WORKERS,
            nonsecure_workers=settings.NONSECURE_WORKERS,
            profile=fx.make_profile() if secure else None,
            executor=fx.make_executor_kind(),
            report_path=report,
            secure=secure,
        )
    )


def cmd_run(args: argparse.Namespace, settings: Settings) -> int:
    reads, mates = _split_reads(args.reads)
    ctx = fx.make_stage_context(args.ref, paired=mates is not None)
    report = args.report or Path(settings.WORKDIR) / 'report.csv'
    result = _run(ctx, settings, reads, mates, report)
    # authenticates the final output; raises AuthFailure otherwise
    read_final(ctx, result.final_path)
    if not report.is_file():
        raise ConfigError('run report was not written', path=str(report))
    print(f'final\t{result.final_path}')
    print(f'report\t{report}')
    print(f'reads\t{result.reads}')
    print(f'dispatch_reduction\t{result.dispatch.reduction():.4f}')
    print(f'undispatched\t{result.dispatch.undispatched}')
    print(f'total_s\t{result.report.total_s:.3f}')
    return 0


def _bench_inputs(args: argparse.Namespace, settings: Settings) -> Tuple[Path, Path]:
    if args.ref is not None and args.reads is not None:
        return args.ref, Path(args.reads)
    if args.ref is not None or args.reads is not None:
        raise ConfigError('bench takes both --ref and --reads, or neither')
    root = Path(settings.WORKDIR) / 'bench'
    root.mkdir(parents=True, exist_ok=True)
    genome = random_genome(
        settings.BENCH_GENOME_LENGTH, seed=settings.BENCH_SEED, name='bench'
    )
    planted = plant_reads(
        genome,
        settings.BENCH_READS,
        settings.READ_LENGTH,
        seed=settings.BENCH_SEED + 1,
        max_substitutions=2,
        grid=settings.BMER - settings.BMER_OVERLAP,
        substitution_margin=10,
    )
    ref, reads = root / 'reference.fa', root / 'reads.fq'
    ref.write_bytes(write_fasta(genome.name, genome.sequence))
    reads.write_bytes(write_fastq(reads_of(planted)))
    logger.info(
        'bench: synthetic genome of %s bases, %s reads',
        genome.length,
        len(planted),
    )
    return ref, reads


def cmd_bench(args: argparse.Namespace, settings: Settings) -> int:
    ref, reads = _bench_inputs(args, settings)
    base = Path(settings.WORKDIR) / 'bench'

    def run_at(p: int) -> PipelineResult:
        ctx = fx.make_stage_context(ref, partitions=p)
        ctx = ctx.model_copy(update={'workdir': base / f'p{p}'})
        secure = not args.insecure_baseline
        return _run(ctx, settings, reads, None, None, secure=secure)

    profile = fx.make_profile()
    rows = run_bench(
        args.partitions,
        run_at,
        profile,
        reference_mb=settings.BENCH_MODEL_REFERENCE_MB,
        secure_workers=args.secure_workers,
    )
    timing = seal_timing(fx.make_vault(), reads.read_bytes(), KeyPolicy.user_key())
    target = write_bench_csv(rows, args.out, timing)
    for row in rows:
        print(
            f'p={row.partitions}\tmeasured={row.measured_wall_s:.3f}s\t'
            f'baseline={row.baseline_s:.1f}s\tparallel={row.parallel_s:.1f}s\t'
            f'speedup={row.speedup:.2f}'
        )
    print(f'csv\t{target}')
    return 0


def cmd_seal(args: argparse.Namespace, settings: Settings) -> int:
    vault = fx.make_vault()
    if not args.source.is_file():
        raise ConfigError('input file not found', stage='seal', path=str(args.source))
    vault.seal_file(args.target, _policy(args.policy, settings), args.source)
    print(args.target)
    return 0


def cmd_unseal(args: argparse.Namespace, settings: Settings) -> int:
    vault = fx.make_vault()
    data = vault.unseal_file(args.source, _policy(args.policy, settings))
    args.target.parent.mkdir(parents=True, exist_ok=True)
    args.target.write_bytes(data)
    print(args.target)
    return 0


def cmd_keygen(args: argparse.Namespace, settings: Settings) -> int:
    for path in (Path(settings.ROOT_KEY_FILE), Path(settings.USER_KEY_FILE)):
        if args.force:
            path.unlink(missing_ok=True)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_key_file(path)
        print(path)
    return 0


def cmd_config(args: argparse.Namespace, settings: Settings) -> int:
    print(settings.show())
    return 0


def format_error(e: DomainError) -> str:
    context = e.context()
    where = f' {context}' if context else ''
    return f'error[{e.code}]{where}: {e.message}'


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = fx.configure(settings_from(args))
        logging.basicConfig(
            level=settings.LOG_LEVEL,
            format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        )
        return args.handler(args, settings)
    except DomainError as e:
        logger.debug('command failed', exc_info=True)
        print(format_error(e), file=sys.stderr)
        return 1
