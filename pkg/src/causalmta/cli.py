"""``causalmta`` command line: one subcommand per pipeline stage.

Every subcommand takes ``--out DIR`` and writes ``DIR/config.txt`` with the
fully resolved configuration. Artifacts carry ``config_hash`` (sha256 of the
canonical JSON config) and ``data_hash`` (sha256 of the input journey file).
Exit codes: 0 success, 2 invalid input or config, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import attribution as at
from . import checks
from . import evaluation as ev
from . import plots
from . import predictor as pr
from . import reweighting as rw
from . import synthgen as sg
from .data import DataError, SplitSpec, criteo_preprocess, load_journeys, read_raw_csv, save_journeys, train_test_split
from .nncore import NumericError, archive

log = logging.getLogger("causalmta")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
REPORT_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # gen
    setting: str = "hybrid"
    n: int = 20_000
    journeys_per_user: int = 1
    # preprocess
    top_n: int = 10
    min_len: int = 3
    gap_days: float = 3.0
    test_fraction: float = 0.2
    # reweighter
    alpha: float = 0.5
    beta: float = 0.5
    d_z: int = 16
    vrae_hidden: int = 64
    vrae_epochs: int = 10
    vrae_batch: int = 128
    kl_warmup: int = 10
    clf_hidden: int = 64
    clf_epochs: int = 20
    negatives: str = "marginal"
    samples: int = 32
    w_min: float = 0.1
    w_max: float = 10.0
    weight_norm: bool = True
    # predictor
    gamma: float = 0.5
    delta: float = 0.5
    lam: float = 1.0
    pred_epochs: int = 10
    pred_batch: int = 128
    pred_lr: float = 1e-3
    pred_hidden: int = 64
    pred_mlp_hidden: int = 64
    # attribution
    exact_max_len: int = 12
    n_permutations: int = 10_000
    converted_only: bool = True
    # replay / report
    fractions: str = "1/2,1/4,1/8,1/16"
    cost_scale: float = 1000.0
    profit_value: float = 1.0
    # gen.<key> entries, passed to the generator config
    gen: dict = field(default_factory=dict)

    def set(self, key: str, raw: str) -> None:
        key, raw = key.strip(), raw.strip()
        if key.startswith("gen."):
            name = key[4:]
            if name not in {f.name for f in fields(sg.GeneratorConfig)}:
                raise ConfigError(f"unknown generator key {key!r}")
            self.gen[name] = raw
            return
        types = {f.name: type(f.default) for f in fields(self) if f.name != "gen"}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(self, key, _parse(types[key], raw))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None

    def fraction_list(self) -> list[float]:
        try:
            out = [float(Fraction(s.strip())) for s in self.fractions.split(",") if s.strip()]
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"bad fractions {self.fractions!r}") from None
        if not out or any(not 0 < f <= 1 for f in out):
            raise ConfigError("fractions must lie in (0, 1]")
        return out

    def generator(self) -> sg.GeneratorConfig:
        return sg.GeneratorConfig.from_kv("\n".join(f"{k} = {v}" for k, v in sorted(self.gen.items())))

    def reweight(self) -> rw.ReweightConfig:
        return rw.ReweightConfig(alpha=self.alpha, beta=self.beta, d_z=self.d_z, hidden=self.vrae_hidden,
                                 epochs=self.vrae_epochs, batch_size=self.vrae_batch, kl_warmup=self.kl_warmup,
                                 clf_hidden=self.clf_hidden, clf_epochs=self.clf_epochs, negatives=self.negatives,
                                 samples=self.samples, w_min=self.w_min, w_max=self.w_max,
                                 normalize=self.weight_norm, seed=self.seed)

    def predictor(self) -> pr.PredictorConfig:
        return pr.PredictorConfig(gamma=self.gamma, delta=self.delta, lam=self.lam, epochs=self.pred_epochs,
                                  batch_size=self.pred_batch, lr=self.pred_lr, hidden=self.pred_hidden,
                                  mlp_hidden=self.pred_mlp_hidden, seed=self.seed)

    def shapley(self) -> at.ShapleyConfig:
        return at.ShapleyConfig(self.exact_max_len, self.n_permutations, self.seed)

    def to_text(self) -> str:
        lines = [f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self) if f.name != "gen"]
        lines += [f"gen.{k} = {v}" for k, v in sorted(self.gen.items())]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _parse(kind: type, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError("expected true or false")
    return kind(raw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    cfg = RunConfig()
    if path:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            cfg.set(*line.split("=", 1))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(*item.split("=", 1))
    return cfg


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_label(weighted: bool, gamma: float) -> str:
    """Names used in the ablation study."""
    if weighted:
        return "CausalMTA" if gamma > 0 else "CM-causal"
    return "CM-rw" if gamma > 0 else "LSTM"


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _check_hash(what: str, meta: dict, key: str, expected: str) -> None:
    got = meta.get(key)
    if got != expected:
        raise DataError(f"{what} was produced from a different input ({key} {str(got)[:12]} != {expected[:12]})")


# -- subcommands ---------------------------------------------------------------------

def cmd_gen(args, cfg: RunConfig, out: Path) -> None:
    gen = sg.generate_dataset(cfg.setting, cfg.n, cfg.journeys_per_user, cfg.generator(), seed=cfg.seed)
    meta = {"config_hash": cfg.hash(), "stage": "gen", "setting": cfg.setting, "seed": cfg.seed}
    save_journeys(gen.dataset, out / "journeys.jsonl", meta=meta)
    sg.save_truth(gen, out / "journeys.truth.jsonl", cfg.seed)
    print(f"wrote {len(gen.dataset)} journeys ({int(gen.dataset.labels.sum())} converted) to {out}")


def cmd_preprocess(args, cfg: RunConfig, out: Path) -> None:
    records = read_raw_csv(_require(args.raw))
    ds = criteo_preprocess(records, cfg.top_n, cfg.min_len, cfg.gap_days)
    meta = {"config_hash": cfg.hash(), "stage": "preprocess", "data_hash": file_hash(args.raw)}
    save_journeys(ds, out / "journeys.jsonl", meta=meta)
    msg = f"wrote {len(ds)} journeys"
    if args.split:
        train, test = train_test_split(ds, SplitSpec(cfg.test_fraction, cfg.seed))
        save_journeys(train, out / "train.jsonl", meta=meta)
        if test is not None:
            save_journeys(test, out / "test.jsonl", meta=meta)
        msg += f" ({len(train)} train / {0 if test is None else len(test)} test)"
    print(msg)


def cmd_train_reweighter(args, cfg: RunConfig, out: Path) -> None:
    ds = load_journeys(_require(args.data))
    meta = {"config_hash": cfg.hash(), "data_hash": file_hash(args.data), "stage": "train-reweighter"}
    model, weights = rw.fit_reweighter(ds, cfg.reweight())
    weights.save(out / "weights.jsonl", meta)
    archive.save(out / "reweighter.ckpt", model.state_dict(), dict(meta, **model.meta()))
    _write_json(out / "reweighter_report.json", dict(meta, **model.report))
    print(f"weights for {len(weights.w)} journeys; {int(weights.clip_hit.sum())} clipped; "
          f"classifier held-out accuracy {model.report['clf_holdout_accuracy']:.3f}")


def cmd_train_predictor(args, cfg: RunConfig, out: Path) -> None:
    ds = load_journeys(_require(args.data))
    data_hash = file_hash(args.data)
    weights = None
    meta = {"config_hash": cfg.hash(), "data_hash": data_hash, "stage": "train-predictor"}
    if args.weights:
        weights, wmeta = rw.JourneyWeights.load(_require(args.weights))
        _check_hash("weights file", wmeta, "data_hash", data_hash)
        meta["weights_hash"] = file_hash(args.weights)
    label = run_label(weights is not None, cfg.gamma)
    model, hist = pr.train_predictor(ds, weights, cfg.predictor())
    model.save(out / "predictor.ckpt", dict(meta, run=label, history=asdict(hist)))
    print(f"{label}: trained on {len(ds)} journeys, final loss {hist.loss[-1] if hist.loss else float('nan'):.4f}")


def _load_model(path):
    model, meta = pr.Predictor.load(_require(path))
    return model, meta, file_hash(path)


def cmd_attribute(args, cfg: RunConfig, out: Path) -> None:
    ds = load_journeys(_require(args.data))
    model, mmeta, model_hash = _load_model(args.model)
    if ds.n_channels != model.n_channels:
        raise DataError(f"data has {ds.n_channels} channels, model expects {model.n_channels}")
    res = at.attribute_dataset(ds, at.model_predict(model), cfg.shapley(), cfg.converted_only)
    meta = {"config_hash": cfg.hash(), "data_hash": file_hash(args.data), "model_hash": model_hash,
            "run": mmeta.get("run"), "stage": "attribute"}
    res.save_jsonl(out / "attribution.jsonl", meta)
    res.save_report_csv(out / "channel_credit.csv",
                        f"config_hash={meta['config_hash']} data_hash={meta['data_hash']} model_hash={model_hash}")
    print(f"attributed {len(res.journeys)} journeys")


def _credits_vectors(ds, res: at.AttributionResult) -> list:
    vecs = res.credits_for(len(ds))
    # channel_roi only reads credits of converted journeys
    return [np.zeros(len(j)) if v is None else v for j, v in zip(ds.journeys, vecs)]


def _roi_and_replay(ds, res: at.AttributionResult, cfg: RunConfig):
    roi = ev.channel_roi(ds.journeys, _credits_vectors(ds, res), ds.n_channels, cost_scale=cfg.cost_scale)
    table = [ev.replay(ds.journeys, roi.weights, f, cost_scale=cfg.cost_scale,
                       profit_value=cfg.profit_value).to_dict() for f in cfg.fraction_list()]
    return roi, table


def cmd_replay(args, cfg: RunConfig, out: Path) -> None:
    ds = load_journeys(_require(args.data))
    data_hash = file_hash(args.data)
    res, ameta = at.AttributionResult.load_jsonl(_require(args.credits))
    _check_hash("attribution file", ameta, "data_hash", data_hash)
    roi, table = _roi_and_replay(ds, res, cfg)
    _write_json(out / "replay.json", {"config_hash": cfg.hash(), "data_hash": data_hash,
                                      "run": ameta.get("run"), "replay": table, "channel_roi": roi.to_rows()})
    for row in table:
        cpa = "n/a" if row["cpa"] is None else f"{row['cpa']:.1f}"
        print(f"budget {Fraction(row['fraction']).limit_denominator(1000)}: {row['selected']} journeys, "
              f"{row['conversions']} conversions, CPA {cpa}, CVR {row['cvr']:.4f}")


def cmd_report(args, cfg: RunConfig, out: Path) -> None:
    ds = load_journeys(_require(args.data))
    data_hash = file_hash(args.data)
    model, mmeta, model_hash = _load_model(args.model)
    p = pr.predict_conversion(ds.journeys, model)
    y = ds.labels
    report = {"schema_version": REPORT_SCHEMA_VERSION, "run": mmeta.get("run", "unknown"),
              "config_hash": cfg.hash(), "data_hash": data_hash, "model_hash": model_hash,
              "train_data_hash": mmeta.get("data_hash"),
              "metrics": {"auc": ev.auc(p, y) if 0 < y.sum() < len(y) else None,
                          "logloss": ev.logloss(p, y), "n": len(ds), "conversions": int(y.sum())},
              "replay": [], "channel_roi": [], "channel_credit": [], "plots": []}
    if args.attribution:
        res, ameta = at.AttributionResult.load_jsonl(_require(args.attribution))
        _check_hash("attribution file", ameta, "data_hash", data_hash)
        _check_hash("attribution file", ameta, "model_hash", model_hash)
        res = _rebuild_report(ds, res)
        roi, table = _roi_and_replay(ds, res, cfg)
        report["replay"] = table
        report["channel_roi"] = roi.to_rows()
        report["channel_credit"] = res.report.to_rows()
        (out / "credit.svg").write_text(plots.bar_chart(res.report.mean_credit, "mean credit per channel"),
                                        encoding="utf-8")
        report["plots"].append("credit.svg")
    hist = mmeta.get("history") or {}
    if hist.get("loss"):
        curves = {k: v for k, v in hist.items() if v}
        (out / "training.svg").write_text(plots.line_chart(curves, "predictor training (per epoch)"),
                                          encoding="utf-8")
        report["plots"].append("training.svg")
    _write_json(out / "report.json", report)
    auc = report["metrics"]["auc"]
    print(f"{report['run']}: AUC {'n/a' if auc is None else f'{auc:.4f}'} "
          f"log-loss {report['metrics']['logloss']:.4f} on {len(ds)} journeys")


def _rebuild_report(ds, res: at.AttributionResult) -> at.AttributionResult:
    """Channel summary from stored per-journey credits."""
    tot = np.zeros(ds.n_channels)
    seen = np.zeros(ds.n_channels, dtype=np.int64)
    for r in res.journeys:
        if r.index >= len(ds):
            raise DataError(f"attribution refers to journey {r.index}, data has {len(ds)}")
        ch = ds.journeys[r.index].channels
        if len(ch) != len(r.credit):
            raise DataError(f"attribution for journey {r.index} has the wrong length")
        np.add.at(tot, ch, r.credit)
        seen[np.unique(ch)] += 1
    res.report = at.ChannelCreditReport(tot / max(len(res.journeys), 1), seen)
    return res


def cmd_verify(args, cfg: RunConfig, out: Path | None) -> int:
    results = checks.run_all(args.instances)
    lines = [r.line() for r in results]
    print("\n".join(lines))
    if out is not None:
        (out / "verify.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


# -- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="causalmta", description="Causal multi-touch attribution pipeline")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, out_required=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="overrides the seed key")
        p.set_defaults(func=fn)
        return p

    p = add("gen", cmd_gen, "simulate journeys with ground-truth conversion probabilities")
    p.add_argument("--setting", choices=[s.value for s in sg.Setting])
    p.add_argument("--n", type=int, help="number of users")

    p = add("preprocess", cmd_preprocess, "turn a raw impression CSV into journeys")
    p.add_argument("--raw", required=True, help="raw impression CSV")
    p.add_argument("--split", action="store_true", help="also write train.jsonl and test.jsonl")

    p = add("train-reweighter", cmd_train_reweighter, "learn per-journey weights")
    p.add_argument("--data", required=True)
    p.add_argument("--no-weight-norm", action="store_true", help="skip mean normalization of the weights")

    p = add("train-predictor", cmd_train_predictor, "train the conversion predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", help="weights file; omitted means unit weights")
    p.add_argument("--gamma", type=float, help="reverse-branch loss weight (0 disables the branch)")

    p = add("attribute", cmd_attribute, "Shapley credits for journeys")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)

    p = add("replay", cmd_replay, "budget-allocation replay driven by credits")
    p.add_argument("--data", required=True)
    p.add_argument("--credits", required=True, help="attribution.jsonl")

    p = add("report", cmd_report, "consolidated JSON report with SVG plots")
    p.add_argument("--data", required=True, help="evaluation journeys")
    p.add_argument("--model", required=True)
    p.add_argument("--attribution", help="attribution.jsonl for the same data and model")

    p = add("verify", cmd_verify, "run the theory and gradient checks", out_required=False)
    p.add_argument("--instances", type=int, default=20, help="random instances per gradient check")
    return ap


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    for flag, key in (("setting", "setting"), ("n", "n"), ("gamma", "gamma")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, key, val)
    if getattr(args, "no_weight_norm", False):
        cfg.weight_norm = False
    # validate eagerly so bad configs fail before any work
    sg.Setting(cfg.setting)
    cfg.generator()
    cfg.reweight()
    cfg.predictor()
    cfg.shapley()
    cfg.fraction_list()
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        out = Path(args.out) if args.out else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        code = args.func(args, cfg, out)
        return EXIT_OK if code is None else code
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
