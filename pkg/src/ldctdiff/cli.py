"""Command-line interface: ``ldctdiff <subcommand> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
Failures print one JSON line to stderr. Progress goes to stderr; data only
to files under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path


from . import config as C
from .core import AttenuationImage, HUWindow, PrelogProjection, Rng, load_array, save_array, write_csv
from .dgdiff import DgdiffModel, train_image_prior
from .nn import build_regressor, load_regressor, save_regressor
from .phantom import make_corpus, make_phantom, shepp_logan_spec
from .physics import simulate_low_dose
from .pipeline import (
    CSV_HEADER,
    METHODS,
    Models,
    clean_projection,
    dose_sweep,
    evaluate,
    reconstruct,
    report_rows,
    summarize,
    to_unit,
)
from .spdiff import SpdiffModel, train_spdiff

__all__ = ["main", "run", "build_parser"]

SPDIFF_FILE = "spdiff.wts"
GDM_FILE = "gdm.wts"


class UsageError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- helpers

def _window(cfg) -> HUWindow:
    return HUWindow(cfg["pipeline"]["hu_lo"], cfg["pipeline"]["hu_hi"])


def _recon_kw(cfg) -> dict:
    return dict(floor=cfg["pipeline"]["log_floor"], fbp_window=cfg["geometry"]["fbp_window"],
                mu_water=cfg["physics"]["mu_water"], window=_window(cfg))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_corpus(data: Path, split: str) -> list[tuple[str, AttenuationImage]]:
    manifest = data / "corpus.json"
    if manifest.exists():
        names = json.loads(manifest.read_text())[split]
    else:
        names = sorted(p.stem for p in data.glob("*.f32raw"))
    items = []
    for name in names:
        img = load_array(data / name)
        if not isinstance(img, AttenuationImage):
            raise ValueError(f"{name} is not an attenuation image")
        items.append((name, img))
    if not items:
        raise ValueError(f"no images for split {split!r} in {data}")
    return items


def _load_image(path) -> AttenuationImage:
    obj = load_array(path)
    if not isinstance(obj, AttenuationImage):
        raise ValueError(f"{path} is not an attenuation image")
    return obj


def _load_projection(path) -> PrelogProjection:
    obj = load_array(path)
    if not isinstance(obj, PrelogProjection):
        raise ValueError(f"{path} is not a pre-log projection")
    return obj


def _resolve_photons(args, cfg, fallback=None) -> float:
    """Absolute photon count wins over a dose fraction."""
    if args.photons is not None:
        if args.photons <= 0:
            raise UsageError("--photons must be positive")
        return float(args.photons)
    if args.dose is not None:
        if not 0 < args.dose <= 1:
            raise UsageError("--dose must lie in (0, 1]")
        return float(args.dose) * cfg["physics"]["i0"]
    if fallback is not None:
        return float(fallback)
    raise UsageError("give --dose or --photons")


def _spdiff_model(cfg, path) -> SpdiffModel:
    net, meta = load_regressor(path)
    if meta.get("kind") != "spdiff":
        raise ValueError(f"{path} does not hold SPDiff weights")
    return SpdiffModel(net, C.lambda_schedule_from(cfg), cfg["physics"]["sigma_e2"])


def _gdm_model(cfg, path) -> DgdiffModel:
    net, meta = load_regressor(path)
    if meta.get("kind") != "gdm":
        raise ValueError(f"{path} does not hold image-prior weights")
    return DgdiffModel(net, C.alpha_schedule_from(cfg), cfg["dgdiff"]["s2"])


def _models(cfg, args, methods) -> Models:
    m = Models()
    if any(x in ("spdiff", "need") for x in methods):
        if not args.spdiff:
            raise UsageError("--spdiff weights are required for spdiff/need")
        m.spdiff = _spdiff_model(cfg, args.spdiff)
    if "need" in methods:
        if not args.gdm:
            raise UsageError("--gdm weights are required for need")
        m.dgdiff = _gdm_model(cfg, args.gdm)
    return m


def _train_progress(name: str, total: int):
    every = max(1, total // 20)

    def cb(it, loss):
        if it % every == 0 or it == total - 1:
            _log(f"[{name}] iter {it + 1}/{total} loss {loss:.4g}")

    return cb


# ---------------------------------------------------------------- commands

def cmd_phantom(args, cfg) -> None:
    out = _out_dir(args)
    geo = C.geometry_from(cfg)
    p = cfg["pipeline"]
    if args.shepp_logan:
        img = make_phantom(shepp_logan_spec(geo.width, geo.height, geo.pixel_size, cfg["physics"]["mu_water"]))
        save_array(out / "shepp_logan", img)
        manifest = {"seed": None, "train": [], "test": ["shepp_logan"]}
    else:
        n, n_test = p["n_phantoms"], p["n_test"]
        corpus = make_corpus(n, p["seed"], n_test, geo.width, geo.height, geo.pixel_size,
                             cfg["physics"]["mu_water"])
        names = [f"phantom_{i:03d}" for i in range(n)]
        for name, img in zip(names, corpus.train + corpus.test):
            save_array(out / name, img)
        manifest = {"seed": p["seed"], "train": names[: n - n_test], "test": names[n - n_test :]}
    (out / "corpus.json").write_text(json.dumps(manifest, indent=1) + "\n")
    _log(f"wrote {len(manifest['train']) + len(manifest['test'])} phantoms to {out}")


def cmd_project(args, cfg) -> None:
    out = _out_dir(args)
    geo = C.geometry_from(cfg)
    src = Path(args.input)
    paths = sorted(src.glob("*.f32raw")) if src.is_dir() else [src]
    for p in paths:
        y = clean_projection(_load_image(p), geo)
        save_array(out / f"{Path(p).stem}_prj", y)
    _log(f"projected {len(paths)} image(s)")


def cmd_simulate(args, cfg) -> None:
    out = _out_dir(args)
    i_ld = _resolve_photons(args, cfg)
    y0 = _load_projection(args.input)
    params = C.noise_params_from(cfg)
    y = simulate_low_dose(y0, i_ld / params.i0, params, Rng(cfg["pipeline"]["seed"]))
    y = PrelogProjection(y.data, meta={**y.meta, "i_ld": i_ld})
    save_array(out / f"{Path(args.input).stem.removesuffix('.f32raw')}_ld", y)
    _log(f"simulated I_ld = {i_ld:g}")


def cmd_train_spdiff(args, cfg) -> None:
    out = _out_dir(args)
    geo = C.geometry_from(cfg)
    data = [clean_projection(img, geo) for _, img in _read_corpus(Path(args.data), "train")]
    s = cfg["spdiff"]
    model = SpdiffModel(build_regressor(C.arch_from(cfg, "spdiff"), s["seed"]), C.lambda_schedule_from(cfg),
                        cfg["physics"]["sigma_e2"])
    tc = C.train_config_from(cfg, "spdiff")
    res = train_spdiff(data, model, tc, Rng(s["seed"]).fork(1), _train_progress("spdiff", tc.iterations))
    save_regressor(model.net, out / SPDIFF_FILE, kind="spdiff", final_loss=res.history[-1])
    _log(f"saved {out / SPDIFF_FILE}")


def cmd_train_gdm(args, cfg) -> None:
    out = _out_dir(args)
    mu_w, win = cfg["physics"]["mu_water"], _window(cfg)
    data = [to_unit(img, mu_w, win) for _, img in _read_corpus(Path(args.data), "train")]
    s = cfg["dgdiff"]
    model = DgdiffModel(build_regressor(C.arch_from(cfg, "dgdiff"), s["seed"]), C.alpha_schedule_from(cfg), s["s2"])
    tc = C.train_config_from(cfg, "dgdiff")
    res = train_image_prior(data, model, tc, Rng(s["seed"]).fork(1), s["t_focus"],
                            _train_progress("gdm", tc.iterations))
    save_regressor(model.net, out / GDM_FILE, kind="gdm", final_loss=res.history[-1])
    _log(f"saved {out / GDM_FILE}")


def cmd_reconstruct(args, cfg) -> None:
    out = _out_dir(args)
    geo = C.geometry_from(cfg)
    y = _load_projection(args.input)
    i_ld = _resolve_photons(args, cfg, y.meta.get("i_ld"))
    models = _models(cfg, args, [args.method])
    x, rep = reconstruct(args.method, y, i_ld, models, geo, Rng(cfg["pipeline"]["seed"]), **_recon_kw(cfg))
    stem = f"recon_{args.method}"
    save_array(out / stem, x)
    info = rep.to_dict()
    if args.reference:
        info["metrics"] = evaluate(x, _load_image(args.reference), cfg["physics"]["mu_water"], _window(cfg))
    if not cfg["pipeline"]["record_timing"]:
        info["timings"] = {}
    (out / f"{stem}.report.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    _log(f"{args.method}: t_prj={rep.t_prj} t_img={rep.t_img} total={rep.total_steps}")


def cmd_evaluate(args, cfg) -> None:
    out = _out_dir(args)
    x, ref = _load_image(args.input), _load_image(args.reference)
    m = evaluate(x, ref, cfg["physics"]["mu_water"], _window(cfg))
    write_csv(out / "metrics.csv", ("input", "psnr", "ssim", "rmse_hu"),
              [(Path(args.input).name, m["psnr"], m["ssim"], m["rmse_hu"])])
    _log(json.dumps(m))


def cmd_sweep(args, cfg) -> None:
    from .plotting import plot_panel, plot_psnr_vs_dose

    out = _out_dir(args)
    geo = C.geometry_from(cfg)
    p = cfg["pipeline"]
    methods = p["methods"]
    for m in methods:
        if m not in METHODS:
            raise C.ConfigError(f"unknown method {m!r} in pipeline.methods")
    items = _read_corpus(Path(args.data), "test")
    if args.limit:
        items = items[: args.limit]
    models = _models(cfg, args, methods)
    images = [img for _, img in items]
    reports, failures = dose_sweep(
        images, models, geo, doses=p["doses"], methods=methods, params=C.noise_params_from(cfg),
        seed=p["seed"], workers=p["workers"], progress=lambda i, n: _log(f"[sweep] slice {i + 1}/{n}"),
        **_recon_kw(cfg),
    )
    write_csv(out / "results.csv", CSV_HEADER, report_rows(reports, p["record_timing"]))
    summary = summarize(reports)
    keys = ["dose", "method", "n"] + [f"{k}_{s}" for k in ("psnr", "ssim", "rmse_hu") for s in ("mean", "std", "median")]
    write_csv(out / "summary.csv", keys, [[r[k] for k in keys] for r in summary])
    (out / "failures.json").write_text(json.dumps(failures, indent=1) + "\n")
    if summary:
        plot_psnr_vs_dose(summary, out / "psnr_vs_dose.png")
        _sweep_panel(images[0], models, geo, cfg, methods, out / "panel.png", plot_panel)
    for r in summary:
        _log(f"dose {r['dose']:<6} {r['method']:<7} PSNR {r['psnr_mean']:.2f} +- {r['psnr_std']:.2f}"
             f"  SSIM {r['ssim_mean']:.4f}  RMSE {r['rmse_hu_mean']:.1f} HU")
    if failures:
        _log(f"{len(failures)} reconstruction(s) failed; see failures.json")


def _sweep_panel(img, models, geo, cfg, methods, path, plot_panel) -> None:
    """Reference plus each method at the lowest-but-one dose of the sweep for the first slice."""
    p = cfg["pipeline"]
    doses = sorted(p["doses"])
    dose = doses[1] if len(doses) > 1 else doses[0]
    params = C.noise_params_from(cfg)
    rng = Rng(p["seed"]).fork(10_000)
    y = simulate_low_dose(clean_projection(img, geo), dose, params, rng.fork(0))
    kw = _recon_kw(cfg)
    panel = {"reference": to_unit(img, kw["mu_water"], kw["window"])}
    for k, m in enumerate(methods):
        x, _ = reconstruct(m, y, y.meta["i_ld"], models, geo, rng.fork(1, k), dose=dose, **kw)
        panel[f"{m} ({dose:g})"] = to_unit(x, kw["mu_water"], kw["window"])
    plot_panel(panel, path)


# ---------------------------------------------------------------- parser

_COMMANDS = {
    # name: (handler, help, config sections read)
    "phantom": (cmd_phantom, "generate the synthetic phantom corpus", ["geometry", "physics", "pipeline"]),
    "project": (cmd_project, "forward project images to clean pre-log projections", ["geometry"]),
    "simulate-dose": (cmd_simulate, "add low-dose Poisson + electronic noise to a projection",
                      ["physics", "pipeline"]),
    "train-spdiff": (cmd_train_spdiff, "train the projection-domain restoration network",
                     ["geometry", "physics", "spdiff"]),
    "train-gdm": (cmd_train_gdm, "train the image-domain noise estimator", ["physics", "dgdiff", "pipeline"]),
    "reconstruct": (cmd_reconstruct, "reconstruct one low-dose projection",
                    ["geometry", "physics", "dgdiff", "pipeline"]),
    "evaluate": (cmd_evaluate, "compare an image with a reference", ["physics", "pipeline"]),
    "sweep": (cmd_sweep, "dose sweep over the held-out corpus with CSV and figures",
              ["geometry", "physics", "dgdiff", "pipeline"]),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ldctdiff", description="Two-stage diffusion denoising for low-dose CT.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (_, helptext, sections) in _COMMANDS.items():
        sp = sub.add_parser(name, help=helptext, description=helptext, epilog=C.describe(sections),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int, help="shortcut for --set pipeline.seed=N")
        sp.add_argument("--out", required=True, help="output directory")
        if name == "phantom":
            sp.add_argument("--n", type=int, help="shortcut for pipeline.n_phantoms")
            sp.add_argument("--n-test", type=int, help="shortcut for pipeline.n_test")
            sp.add_argument("--shepp-logan", action="store_true", help="write the classic phantom only")
        if name in ("project", "simulate-dose", "reconstruct", "evaluate"):
            sp.add_argument("--input", required=True, help="input array (.f32raw) or directory")
        if name in ("simulate-dose", "reconstruct"):
            sp.add_argument("--dose", type=float, help="dose as a fraction of physics.i0")
            sp.add_argument("--photons", type=float, help="absolute incident photons I_ld (wins over --dose)")
        if name in ("train-spdiff", "train-gdm", "sweep"):
            sp.add_argument("--data", required=True, help="phantom directory written by `phantom`")
        if name in ("reconstruct", "sweep"):
            sp.add_argument("--spdiff", help=f"SPDiff weights ({SPDIFF_FILE})")
            sp.add_argument("--gdm", help=f"image-prior weights ({GDM_FILE})")
        if name == "reconstruct":
            sp.add_argument("--method", choices=METHODS, default="need")
            sp.add_argument("--reference", help="ground-truth image for metrics")
        if name == "evaluate":
            sp.add_argument("--reference", required=True, help="ground-truth image")
        if name == "sweep":
            sp.add_argument("--limit", type=int, help="use only the first N test slices")
    return parser


def _effective_config(args) -> dict:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"pipeline.seed={args.seed}")
    if getattr(args, "n", None) is not None:
        overrides.append(f"pipeline.n_phantoms={args.n}")
    if getattr(args, "n_test", None) is not None:
        overrides.append(f"pipeline.n_test={args.n_test}")
    return C.load_config(args.config, overrides)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 2
        cfg = _effective_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        C.dump_config(cfg, out / f"config.{args.command}.yaml")
        start = time.perf_counter()
        _COMMANDS[args.command][0](args, cfg)
        _log(f"{args.command} done in {time.perf_counter() - start:.1f}s")
        return 0
    except (UsageError, C.ConfigError) as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
