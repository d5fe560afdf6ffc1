"""Command-line front end.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import re
import shutil
import sys
import tempfile
import warnings
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import __version__
from .config import Config, load_config
from .errors import FormatError, ParameterError, ProtocolError, SegmentationError, VeinFPNError
from .evalkit import ScoreSet, build_nom_protocol, evaluate, read_manifest
from .formats import (
    ScoreRow,
    canonical_json,
    config_hash,
    decode_template,
    encode_template,
    read_scores,
    write_scores,
)
from .imaging import load_gray, save_gray
from .presentation import Presentation
from .recognizer import VeinTemplate, mc_extract, preprocess, safe_match

log = logging.getLogger("veinfpn")

INCOMPLETE = "INCOMPLETE"
_SESSION = re.compile(r"^(?P<identity>.+)_s(?P<session>\d+)$")


class UsageError(Exception):
    exit_code = 2


# --------------------------------------------------------------------------
# output helpers


@contextlib.contextmanager
def atomic_file(path: Path) -> Iterator[Path]:
    """Yield a temporary sibling path that replaces ``path`` only on success."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    tmp_path = Path(tmp)
    try:
        yield tmp_path
        os.replace(tmp_path, path)
    finally:
        if tmp_path.exists():
            tmp_path.unlink()


@contextlib.contextmanager
def output_dir(path: Path) -> Iterator[Path]:
    """Directory outputs carry an INCOMPLETE marker until the command succeeds."""
    path.mkdir(parents=True, exist_ok=True)
    marker = path / INCOMPLETE
    marker.write_text("this directory was left by a failed or interrupted run\n")
    yield path
    marker.unlink()


def write_json(path: Path, obj) -> None:
    with atomic_file(path) as tmp:
        tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FormatError(f"{directory}: not a directory")
    files = [p for p in sorted(directory.iterdir()) if p.suffix.lower() in (".png", ".pgm")]
    return [p for p in files if not p.name.endswith(".mask.png")]


def _parse_pair(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W but got {text!r}") from None
    return h, w


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: Config) -> None:
    from .synth import SynthSpec, synth_generate

    spec = cfg.synth
    n_ids, n_sessions = args.identities, args.sessions
    if args.spec:
        try:
            doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"{args.spec}: cannot read synth spec ({exc})") from exc
        n_ids = int(doc.pop("identities", n_ids))
        n_sessions = int(doc.pop("sessions", n_sessions))
        preset = doc.pop("preset", None)
        try:
            spec = SynthSpec.low_contrast(**doc) if preset == "low_contrast" else SynthSpec(**doc)
        except TypeError as exc:
            raise ParameterError(f"invalid synth spec: {exc}") from exc
    with output_dir(Path(args.out)) as out:
        records = synth_generate(spec, n_ids, n_sessions, out)
        write_json(
            out / "synth.json",
            {"spec": spec.to_dict(), "identities": n_ids, "sessions": n_sessions, "config_hash": config_hash(spec.to_dict())},
        )
    print(f"wrote {len(records)} presentations to {args.out}")


def cmd_protocol(args, cfg: Config) -> None:
    manifest = read_manifest(args.manifest)
    p = cfg.protocol
    split = build_nom_protocol(manifest, p.enroll_sessions, p.probe_sessions, p.fractions, p.client_ranges)
    doc = split.to_dict()
    doc["train_samples"] = [
        {"id": e.sample_id, "file": e.file, "mask": e.mask}
        for e in split.samples("train", "all")
        if e.session in p.train_sessions
    ]
    for name in ("dev", "eval"):
        doc[f"{name}_enroll"] = [e.sample_id for e in split.samples(name, "enroll")]
        doc[f"{name}_probe"] = [e.sample_id for e in split.samples(name, "probe")]
    doc["config_hash"] = cfg.hash
    write_json(Path(args.out), doc)
    print(f"train {len(split.train)} / dev {len(split.dev)} / eval {len(split.eval)} identities")


def _training_samples(args, cfg: Config):
    from .trainer import TrainSample, load_training_dir, prepare

    data = Path(args.data)
    if not args.protocol:
        return load_training_dir(data, cfg.train.target_size)
    doc = _load_json(args.protocol)
    samples = []
    for item in doc.get("train_samples", []):
        if not item.get("mask"):
            continue
        raw = np.rint(load_gray(data / item["mask"]) * 255).astype(np.uint8)
        if not np.all((raw == 0) | (raw == 255)):
            raise FormatError(f"{item['mask']}: mask must contain only 0 and 255")
        img = Presentation(load_gray(data / item["file"]), item["id"])
        samples.append(prepare(TrainSample(img, (raw == 255).astype(np.uint8)), cfg.train.target_size))
    if not samples:
        raise ProtocolError(f"{args.protocol}: no annotated training samples")
    return samples


def cmd_train(args, cfg: Config) -> None:
    from .resfpn import ResFPNModel
    from .trainer import checkpoint_save, fit

    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    samples = _training_samples(args, cfg)
    model = ResFPNModel.build(cfg.model)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    reports = []

    def on_epoch(report):
        reports.append(report.to_dict())
        log.info("epoch %d loss %.5f", report.epoch, report.mean_loss)

    result = fit(model, samples, cfg.train, on_epoch=on_epoch)
    extra = {"config_hash": cfg.hash, "train": cfg.train.to_dict(), "samples": len(samples)}
    with atomic_file(out) as tmp:
        checkpoint_save(result.model, result.adam_state, tmp, extra)
    with atomic_file(log_path) as tmp:
        tmp.write_text("".join(canonical_json(r) + "\n" for r in reports), encoding="utf-8")
    print(f"trained {len(reports)} epochs on {len(samples)} presentations -> {out}")


def cmd_enhance(args, cfg: Config) -> None:
    from .resfpn import enhance
    from .trainer import checkpoint_load

    model, _, meta = checkpoint_load(args.ckpt)
    alpha = model.alpha if args.alpha is None else args.alpha
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha {alpha} outside [0, 1]")
    src = Path(args.inp)
    files = _images(src)
    with output_dir(Path(args.out)) as out:
        for f in files:
            p = Presentation(load_gray(f), f.stem)
            save_gray(out / f"{f.stem}.png", enhance(model, p, alpha).pixels)
        if (src / "manifest.csv").exists():
            shutil.copyfile(src / "manifest.csv", out / "manifest.csv")
        write_json(
            out / "enhance.json",
            {"checkpoint_hash": meta.get("config_hash"), "alpha": alpha, "files": len(files), "config_hash": cfg.hash},
        )
    print(f"enhanced {len(files)} presentations")


def cmd_extract(args, cfg: Config) -> None:
    rc = cfg.recognizer
    files = _images(Path(args.inp))
    failures = []
    with output_dir(Path(args.out)) as out:
        for f in files:
            try:
                tpl = mc_extract(preprocess(Presentation(load_gray(f), f.stem), rc.output_size), rc.sigma, rc.roi_margin)
            except SegmentationError as exc:
                log.warning("%s: %s", f.name, exc)
                failures.append({"id": f.stem, "reason": str(exc)})
                continue
            (out / f"{f.stem}.tpl").write_bytes(encode_template(tpl.map, f.stem))
        write_json(out / "extract.json", {"templates": len(files) - len(failures), "failures": failures, "config_hash": cfg.hash})
    print(f"extracted {len(files) - len(failures)} templates, {len(failures)} segmentation failures")


def _load_templates(directory: Path) -> dict[str, VeinTemplate]:
    if not directory.is_dir():
        raise FormatError(f"{directory}: not a directory")
    out = {}
    for f in sorted(directory.glob("*.tpl")):
        m, sid = decode_template(f.read_bytes(), str(f))
        out[f.stem] = VeinTemplate(m, sid or f.stem)
    return out


def _identity(sample_id: str) -> str:
    m = _SESSION.match(sample_id)
    return m.group("identity") if m else sample_id


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})", exc.pos) from exc


def cmd_match(args, cfg: Config) -> None:
    shift = args.shift or cfg.recognizer.shift
    probes = _load_templates(Path(args.probes))
    models_dir = _load_templates(Path(args.models))
    if args.protocol:
        doc = _load_json(args.protocol)
        if args.subset not in ("dev", "eval"):
            raise UsageError("--subset must be dev or eval when --protocol is given")
        probe_ids = [p for p in doc[f"{args.subset}_probe"] if p in probes]
        enroll_ids = [e for e in doc[f"{args.subset}_enroll"] if e in models_dir]
        identities = sorted(doc[args.subset])
    else:
        probe_ids = sorted(probes)
        enroll_ids = sorted(models_dir)
        identities = sorted({_identity(e) for e in enroll_ids})
    models: dict[str, list[VeinTemplate]] = {m: [] for m in identities}
    for e in enroll_ids:
        models.setdefault(_identity(e), []).append(models_dir[e])
    rows, undefined = [], 0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for pid in probe_ids:
            for mid, templates in models.items():
                if not templates:
                    continue
                scores = [safe_match(probes[pid], t, *shift) for t in templates]
                undefined += sum(not s.defined for s in scores)
                agg = max if cfg.recognizer.template_agg == "max" else (lambda v: float(np.mean(v)))
                rows.append(ScoreRow(pid, mid, agg([s.value for s in scores]), _identity(pid) == mid))
    for w in caught:
        log.warning("%s", w.message)
    with atomic_file(Path(args.out)) as tmp:
        write_scores(tmp, rows, comment=f"config_hash={cfg.hash} shift={shift[0]},{shift[1]} undefined={undefined}")
    print(f"{len(rows)} comparisons ({undefined} undefined scored as 0)")


def _score_hashes(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    return re.findall(r"config_hash=(\w+)", first)


def cmd_evaluate(args, cfg: Config) -> None:
    dev = ScoreSet.from_rows(read_scores(args.dev))
    ev = ScoreSet.from_rows(read_scores(args.eval))
    dev_rep, eval_rep = evaluate(dev, ev, args.bins)
    report = {
        "threshold_source": "dev EER",
        "dev": dev_rep.to_dict(),
        "eval": eval_rep.to_dict(),
        "score_hashes": {"dev": _score_hashes(args.dev), "eval": _score_hashes(args.eval)},
        "config_hash": cfg.hash,
    }
    with output_dir(Path(args.out)) as out:
        write_json(out / "report.json", report)
        for name, rep in (("dev", dev_rep), ("eval", eval_rep)):
            with atomic_file(out / f"roc_{name}.csv") as tmp:
                tmp.write_text(
                    "fmr,tpr\n" + "".join(f"{a:.6f},{b:.6f}\n" for a, b in rep.roc), encoding="utf-8"
                )
            h = rep.histograms
            lines = ["bin_lo,bin_hi,genuine,impostor\n"]
            for i in range(len(h["genuine"])):
                lines.append(f"{h['edges'][i]:.6f},{h['edges'][i + 1]:.6f},{h['genuine'][i]},{h['impostor'][i]}\n")
            with atomic_file(out / f"hist_{name}.csv") as tmp:
                tmp.write_text("".join(lines), encoding="utf-8")
    for name, rep in (("dev", dev_rep), ("eval", eval_rep)):
        r = rep.rendered()
        print(f"{name}: FMR {r['fmr']}  FNMR {r['fnmr']}  HTER {r['hter']}")


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="veinfpn", description="Finger-vein enhancement and recognition toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON config (default: $VEINFPN_CONFIG, else built-in defaults)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="JSON synth spec; may also set identities, sessions and preset")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--sessions", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("protocol", help="build the train/dev/eval split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("train", help="train the enhancement network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", help="restrict training to the protocol's annotated train samples")
    p.add_argument("--epochs", type=int)
    p.add_argument("--log", help="epoch log path (default: <out>.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="blend the network's vein map into presentations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("extract", help="preprocess and extract vein templates")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("match", help="score probes against enrolled models")
    p.add_argument("--probes", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shift", type=_parse_pair, help="maximum shift H,W")
    p.add_argument("--protocol")
    p.add_argument("--subset", default="dev")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("evaluate", help="EER threshold on dev, HTER on eval")
    p.add_argument("--dev", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail("UsageError", str(exc), UsageError.exit_code)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except UsageError as exc:
        return _fail("UsageError", str(exc), UsageError.exit_code)
    except VeinFPNError as exc:
        return _fail(type(exc).__name__, str(exc), exc.exit_code)
    except FileNotFoundError as exc:
        return _fail("FileNotFoundError", str(exc), 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
