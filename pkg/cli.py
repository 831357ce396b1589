#!/usr/bin/env python3
"""
mmtranslate/cli.py
Command-line interface: synthetic corpus generation, single pipeline runs,
the full experiment grid, dataset validation and report rendering.
"""

import sys
import json
import argparse
import concurrent.futures
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from tqdm import tqdm

from config.config import RunConfig, config_service
from services.checkpoint import checkpoint_service
from services.data import (
    Dataset, generate_synthetic, open_dataset, save_dataset, synthetic_header, validate_file,
)
from services.errors import StorageError, TranslateError, TrainingInterrupted
from services.pipelines import (
    PipelineSpec, RunContext, enumerate_variations, pipeline_service, resolve_spec,
)
from services.reporting import (
    load_report, render_report, render_summary, report_document, summary_row,
    write_failure, write_report,
)
from services.training import TrainingLoop

STAGE_FLAGS = {
    'cell': 'cell_kind',
    'layers': 'num_layers',
    'hidden': 'hidden_size',
    'lr': 'learning_rate',
    'epochs': 'epochs',
    'beam_width': 'beam_width',
    'clip_norm': 'clip_norm',
    'attention': 'attention',
    'accumulate': 'accumulate',
}


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def provide_dataset(config: RunConfig) -> Dataset:
    """Dataset file when configured, otherwise the seeded synthetic corpus"""
    if config.dataset:
        return open_dataset(config.dataset)
    syn = config.synthetic
    segments = generate_synthetic(syn.n_segments, (syn.t_min, syn.t_max), tuple(syn.dims),
                                  syn.vocab_size, syn.coupling, config.seed)
    return Dataset(synthetic_header(syn.dims, syn.vocab_size), segments)


def failure_message(error: BaseException) -> str:
    if isinstance(error, TranslateError):
        return error.message
    return f"{type(error).__name__}: {error}"


def execute_spec(spec: PipelineSpec, dataset: Dataset, config: RunConfig, resume: bool = False,
                 halt_after_epoch: Optional[int] = None) -> Tuple[Path, Dict[str, Any]]:
    """Run one spec inside <output_dir>/<spec id>; failures leave a FAILED marker"""
    run_dir = Path(config.output_dir) / spec.id
    config_hash = config_service.config_hash(config)
    if not resume and (run_dir / 'report.json').exists():
        print(f"⚠️  Overwriting previous results in {run_dir}")
    config_service.save_snapshot(run_dir, config)
    ctx = RunContext(run_dir, resume, config_hash, halt_after_epoch)
    try:
        result = pipeline_service.run(spec, dataset, config, ctx=ctx)
    except Exception as e:
        write_failure(run_dir, failure_message(e))
        raise
    doc = report_document(result, config_hash)
    write_report(run_dir, doc)
    return run_dir, doc


def _grid_worker(spec_id: str, config_data: Dict[str, Any], resume: bool) -> Tuple[str, Optional[Dict], Optional[str]]:
    """Process-pool entry point; rebuilds everything from plain data"""
    config = config_service.from_dict(config_data)
    spec = next(s for s in enumerate_variations() if s.id == spec_id)
    try:
        _, doc = execute_spec(spec, provide_dataset(config), config, resume)
        return spec_id, doc, None
    except Exception as e:
        return spec_id, None, failure_message(e)


class TranslateCLI:
    """Main CLI application"""

    def __init__(self):
        self.config = config_service
        self.pipelines = pipeline_service
        self.debug = False

    def _set_debug(self, enabled: bool) -> None:
        self.debug = enabled
        for service in (config_service, checkpoint_service, pipeline_service):
            service.debug = enabled
        TrainingLoop.verbose = enabled

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog='mmtranslate',
            description='Multimodal sequence-to-sequence modality translation toolkit',
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  mmtranslate generate -o data/synth.jsonl --seed 1 --segments 40
  mmtranslate validate data/synth.jsonl
  mmtranslate specs
  mmtranslate run --spec 08-T-V --dataset data/synth.jsonl --seed 1 --epochs 20
  mmtranslate run --spec 08-T-V --dataset data/synth.jsonl --seed 1 --resume
  mmtranslate grid --dataset data/synth.jsonl --seed 1 --jobs 4
  mmtranslate report runs/08-T-V
            """
        )

        # Global flags
        parser.add_argument('-v', '--verbose', action='store_true',
                            help='Enable verbose debug output')

        subparsers = parser.add_subparsers(dest='command', help='Commands')

        # ========================================================================
        # Data Commands
        # ========================================================================

        gen_parser = subparsers.add_parser('generate', help='Write a synthetic aligned corpus')
        gen_parser.add_argument('-o', '--output', required=True, help='Dataset file to write')
        gen_parser.add_argument('--seed', type=int, required=True, help='Generator seed')
        gen_parser.add_argument('--config', help='JSON config file')
        gen_parser.add_argument('--segments', type=int, help='Number of segments')
        gen_parser.add_argument('--t-min', type=int, help='Shortest segment length')
        gen_parser.add_argument('--t-max', type=int, help='Longest segment length')
        gen_parser.add_argument('--dims', type=int, nargs=3, metavar=('D_T', 'D_A', 'D_V'),
                                help='Feature dims of text, audio, video')
        gen_parser.add_argument('--vocab-size', type=int, help='Vocabulary size incl. start/end')
        gen_parser.add_argument('--coupling', type=float, help='Cross-modal coupling in [0, 1]')

        val_parser = subparsers.add_parser('validate', help='Check every segment of a dataset file')
        val_parser.add_argument('path', help='Dataset file')

        # ========================================================================
        # Training Commands
        # ========================================================================

        run_parser = subparsers.add_parser('run', help='Run one pipeline spec')
        run_parser.add_argument('--spec', help='Pipeline spec id (see "specs")')
        run_parser.add_argument('--dry-run', action='store_true',
                                help='Check dimension bookkeeping without training')
        self._add_training_flags(run_parser)

        grid_parser = subparsers.add_parser('grid', help='Run every spec of the experiment grid')
        grid_parser.add_argument('--jobs', type=int, default=1, help='Specs run concurrently')
        self._add_training_flags(grid_parser)

        subparsers.add_parser('specs', help='List the experiment grid')

        report_parser = subparsers.add_parser('report', help='Render a run or grid report as tables')
        report_parser.add_argument('path', help='Run directory, report.json or summary.json')

        return parser

    def _add_training_flags(self, p: argparse.ArgumentParser) -> None:
        p.add_argument('--seed', type=int, required=True, help='Run seed')
        p.add_argument('--config', help='JSON config file')
        p.add_argument('--dataset', help='Dataset file (default: synthetic corpus from config)')
        p.add_argument('-o', '--output-dir', help='Directory receiving run directories')
        p.add_argument('--cell', choices=['lstm', 'gru'], help='Recurrent cell kind')
        p.add_argument('--layers', type=int, help='Stacked layers K')
        p.add_argument('--hidden', type=int, help='Hidden size D')
        p.add_argument('--lr', type=float, help='Learning rate')
        p.add_argument('--epochs', type=int, help='Epochs per stage')
        p.add_argument('--beam-width', type=int, help='Beam width for token decoding')
        p.add_argument('--clip-norm', type=float, help='Global gradient-norm clip')
        p.add_argument('--attention', action='store_true', default=None,
                       help='Enable decoder attention and attention pooling')
        p.add_argument('--accumulate', type=int, help='Segments per SGD step')
        p.add_argument('--finetune-encoder', action='store_true', default=None,
                       help='Update the encoder during regression')
        p.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                       help='Any config field, e.g. translation.epochs=5')
        p.add_argument('--resume', action='store_true', help='Continue from stage checkpoints')
        # Stops after the given epoch's checkpoint; used to exercise --resume
        p.add_argument('--halt-after-epoch', type=int, help=argparse.SUPPRESS)

    def _overrides(self, args) -> Dict[str, Any]:
        overrides: Dict[str, Any] = {'seed': args.seed}
        for flag, key in (('spec', 'spec'), ('dataset', 'dataset'), ('output_dir', 'output_dir')):
            overrides[key] = getattr(args, flag, None)
        for flag, key in STAGE_FLAGS.items():
            value = getattr(args, flag, None)
            overrides[f"translation.{key}"] = value
            overrides[f"regression.{key}"] = value
        overrides['regression.finetune_encoder'] = getattr(args, 'finetune_encoder', None)
        for item in getattr(args, 'set', []) or []:
            key, sep, raw = item.partition('=')
            if not sep:
                raise ValueError(f"--set expects KEY=VALUE, got '{item}'")
            overrides[key.strip()] = _parse_value(raw)
        return overrides

    def run(self, args: list) -> int:
        """Main entry point"""
        parser = self.build_parser()
        parsed = parser.parse_args(args)
        self._set_debug(parsed.verbose)

        try:
            if parsed.command == 'generate':
                return self.handle_generate(parsed)
            elif parsed.command == 'validate':
                return self.handle_validate(parsed)
            elif parsed.command == 'run':
                return self.handle_run(parsed)
            elif parsed.command == 'grid':
                return self.handle_grid(parsed)
            elif parsed.command == 'specs':
                return self.handle_specs()
            elif parsed.command == 'report':
                return self.handle_report(parsed)
            else:
                parser.print_help()
                return 1

        except KeyboardInterrupt:
            print("\n❌ Cancelled by user")
            return 2
        except TranslateError as e:
            print(f"❌ {e.message}")
            if isinstance(e, TrainingInterrupted):
                print("💡 Continue with the same command plus --resume")
            if self.debug:
                import traceback
                traceback.print_exc()
            return e.exit_code
        except ValueError as e:
            print(f"❌ Error: {e}")
            return 1
        except OSError as e:
            print(f"❌ I/O error: {e}")
            return StorageError.exit_code
        except Exception as e:
            print(f"❌ Error: {e}")
            if self.debug:
                import traceback
                traceback.print_exc()
            return 2

    # ============================================================================
    # DATA HANDLERS
    # ============================================================================

    def handle_generate(self, args) -> int:
        """Handle generate command"""
        overrides = {
            'seed': args.seed,
            'synthetic.n_segments': args.segments,
            'synthetic.t_min': args.t_min,
            'synthetic.t_max': args.t_max,
            'synthetic.dims': args.dims,
            'synthetic.vocab_size': args.vocab_size,
            'synthetic.coupling': args.coupling,
        }
        config = self.config.load(args.config, overrides)
        syn = config.synthetic
        print(f"🔄 Generating {syn.n_segments} segments (dims {syn.dims}, coupling {syn.coupling})...")
        segments = generate_synthetic(syn.n_segments, (syn.t_min, syn.t_max), tuple(syn.dims),
                                      syn.vocab_size, syn.coupling, config.seed)
        path = save_dataset(args.output, segments, synthetic_header(syn.dims, syn.vocab_size))
        print(f"✅ Wrote {len(segments)} segments to {path}")
        return 0

    def handle_validate(self, args) -> int:
        """Handle validate command"""
        header, diagnostics = validate_file(args.path)
        print(f"🔍 Header: dims T={header.dims['T']} A={header.dims['A']} V={header.dims['V']}, "
              f"vocabulary {header.vocab_size}, format version {header.format_version}")
        if diagnostics:
            for diag in diagnostics:
                print(f"❌ {diag}")
            print(f"\n📊 {len(diagnostics)} violation(s)")
            return 1
        print("✅ Dataset is valid")
        return 0

    # ============================================================================
    # TRAINING HANDLERS
    # ============================================================================

    def handle_run(self, args) -> int:
        """Handle run command"""
        config = self.config.load(args.config, self._overrides(args))
        spec = resolve_spec(config)
        dataset = provide_dataset(config)
        if args.dry_run:
            for record in self.pipelines.dry_run(spec, dataset.header, config):
                print(f"   {record}")
            print(f"✅ {spec.id}: dimensions consistent")
            return 0

        print(f"🔄 Running {spec.id} ({spec.label}) on {len(dataset)} segments")
        run_dir, doc = execute_spec(spec, dataset, config, args.resume, args.halt_after_epoch)
        print(render_report(doc))
        print(f"✅ Results in {run_dir}")
        return 0

    def handle_grid(self, args) -> int:
        """Handle grid command; one failing spec does not stop the others"""
        config = self.config.load(args.config, self._overrides(args))
        specs = enumerate_variations()
        dataset = provide_dataset(config)
        print(f"🔄 Running {len(specs)} pipelines on {len(dataset)} segments (jobs={args.jobs})")

        outcomes: Dict[str, Tuple[Optional[Dict], Optional[str]]] = {}
        if args.jobs > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as executor:
                futures = {}
                for spec in specs:
                    data = replace(config, spec=spec.id, inline_spec=None).to_dict()
                    futures[executor.submit(_grid_worker, spec.id, data, args.resume)] = spec.id
                with tqdm(total=len(futures), unit="spec", desc="Grid", disable=None) as pbar:
                    for future in concurrent.futures.as_completed(futures):
                        try:
                            spec_id, doc, error = future.result()
                        except Exception as e:
                            # the worker process itself died
                            spec_id, doc, error = futures[future], None, failure_message(e)
                        outcomes[spec_id] = (doc, error)
                        pbar.update(1)
        else:
            for spec in tqdm(specs, unit="spec", desc="Grid", disable=None):
                try:
                    _, doc = execute_spec(spec, dataset, replace(config, spec=spec.id, inline_spec=None), args.resume,
                                          args.halt_after_epoch)
                    outcomes[spec.id] = (doc, None)
                except Exception as e:
                    outcomes[spec.id] = (None, failure_message(e))

        rows = [summary_row(spec, *outcomes[spec.id]) for spec in specs]
        summary_path = Path(config.output_dir) / 'summary.json'
        summary_path.parent.mkdir(parents=True, exist_ok=True)
        with open(summary_path, 'w', encoding='utf-8') as f:
            json.dump({'rows': rows}, f, indent=2, sort_keys=True)
        print(render_summary(rows))
        for row in rows:
            if row['status'] != 'ok':
                print(f"❌ {row['id']}: {row.get('error')}")
        return 0 if all(r['status'] == 'ok' for r in rows) else 2

    def handle_specs(self) -> int:
        """Handle specs command"""
        specs = enumerate_variations()
        for spec in specs:
            print(f"  {spec.id.ljust(24)} {spec.kind.ljust(18)} {spec.label}")
        print(f"\n📊 Total: {len(specs)} pipeline specs")
        return 0

    def handle_report(self, args) -> int:
        """Handle report command"""
        path = Path(args.path)
        if path.is_dir() and (path / 'summary.json').exists() and not (path / 'report.json').exists():
            path = path / 'summary.json'
        doc = load_report(path)
        if 'rows' in doc:
            print(render_summary(doc['rows']))
        else:
            print(render_report(doc))
        return 0


def main():
    """Main entry point"""
    cli = TranslateCLI()
    sys.exit(cli.run(sys.argv[1:]))


if __name__ == '__main__':
    main()
