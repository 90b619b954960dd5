"""Command-line entry point: synth, train-classifier, train-encoder, invert, explain, eval.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .blobgen import BlobScene, Generator, GeneratorConfig
from .classifier import ClassifierModel, train_classifier
from .config import ConfigError, dump_config, load_hyperparams
from .counterfact import MODES, Models, explain, invert
from .encoder import EncoderModel, ScenePrior, finetune_encoder, pretrain_encoder
from .evaluation import evaluate_run, select_queries
from .imageio import read_pgm, write_pgm
from .numerics import child_seed, make_rng
from .phantom import PhantomPrior, load_split, synthesize_dataset

log = logging.getLogger("blobcf")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"missing file: {path}") from exc


def load_generator(path) -> Generator:
    return Generator(GeneratorConfig.from_dict(_read_json(path)))


def load_models(models_dir) -> Models:
    d = Path(models_dir)
    for name in ("generator.json", "classifier.json", "encoder.json"):
        if not (d / name).exists():
            raise UsageError(f"{d} lacks {name}")
    return Models(load_generator(d / "generator.json"), ClassifierModel.load(d / "classifier.json"),
                  EncoderModel.load(d / "encoder.json"))


def _load_data(data_dir):
    data = Path(data_dir)
    man = _read_json(data / "manifest.json")
    gen = Generator(GeneratorConfig.from_dict(man["generator"]))
    return man, gen


def _save_generator_beside(out_file, gen: Generator) -> None:
    target = Path(out_file).parent / "generator.json"
    if not target.exists():
        _write_json(target, gen.config.to_dict())


def _read_image(path, gen_res: int) -> torch.Tensor:
    try:
        img = read_pgm(path)
    except FileNotFoundError as exc:
        raise UsageError(f"missing image: {path}") from exc
    if img.shape != (gen_res, gen_res):
        raise UsageError(f"{path} is {img.shape[1]}x{img.shape[0]}, models expect {gen_res}x{gen_res}")
    return torch.from_numpy(img)


def cmd_synth(args) -> None:
    if args.n_per_class < 1 or args.blobs < 3:
        raise UsageError("need --n-per-class >= 1 and --blobs >= 3")
    gen = Generator(GeneratorConfig(resolution=args.res, K=args.blobs))
    samples, man = synthesize_dataset(args.n_per_class, gen, make_rng(args.seed))
    out = Path(args.out)
    for entry, s in zip(man["samples"], samples):
        write_pgm(out / entry["image"], s.image)
    _write_json(out / "manifest.json", man)
    _write_json(out / "generator.json", gen.config.to_dict())
    log.info("wrote %d samples to %s", len(samples), out)


def cmd_train_classifier(args) -> None:
    man, gen = _load_data(args.data)
    _, x_tr, y_tr = load_split(man, "train", gen)
    _, x_va, y_va = load_split(man, "val", gen)
    model = train_classifier(x_tr, y_tr, x_va, y_va, make_rng(args.seed))
    model.save(args.out)
    _save_generator_beside(args.out, gen)
    print(json.dumps(model.report, sort_keys=True))


def cmd_train_encoder(args) -> None:
    man, _ = _load_data(args.data)
    gen = load_generator(args.generator)
    rng = make_rng(args.seed)
    prior = PhantomPrior(gen.K, gen.d_s) if args.prior == "phantom" else ScenePrior(gen.K, gen.d_s)
    if args.phase == "pretrain":
        model = EncoderModel.initialize(gen.K, gen.d_s, prior, gen, make_rng(child_seed(rng)),
                                        resolution=gen.resolution)
        pretrain_encoder(model, prior, gen, args.steps, rng)
    else:
        init = args.init or args.out
        if not Path(init).exists():
            raise UsageError(f"finetuning needs a pretrained encoder (--init); {init} not found")
        model = EncoderModel.load(init)
        clf = ClassifierModel.load(args.classifier)
        _, x_tr, _ = load_split(man, "train", gen)
        finetune_encoder(model, x_tr, prior, gen, clf, steps=args.steps, rng=rng)
    model.save(args.out)
    model.write_traces_csv(Path(args.out).with_suffix(".traces.csv"))
    _save_generator_beside(args.out, gen)


def _write_phase_trace(path, traces: dict) -> None:
    terms = list(traces)
    rows = ["step," + ",".join(terms)]
    for i in range(len(traces[terms[0]])):
        rows.append(f"{i}," + ",".join(repr(float(traces[t][i])) for t in terms))
    Path(path).write_text("\n".join(rows) + "\n")


def cmd_invert(args, hp) -> None:
    models = load_models(args.models)
    x = _read_image(args.image, models.generator.resolution)
    res = invert(x, models, hp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = BlobScene.unflatten(res.scenes[0].numpy(), models.generator.K, models.generator.d_s)
    (out / "scene.json").write_text(scene.to_json() + "\n")
    write_pgm(out / "reconstruction.pgm", res.images[0].numpy())
    _write_phase_trace(out / "trace.csv", {k: v[:, 0] for k, v in res.traces.items()})
    _write_json(out / "summary.json", {"best_step": int(res.best_step[0]),
                                       "pixel_mse": float(((res.images[0] - x) ** 2).mean())})


def cmd_explain(args, hp) -> None:
    models = load_models(args.models)
    x = _read_image(args.image, models.generator.resolution)
    r = explain(x, args.target, args.mode, models, hp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    body = r.to_dict(include_timing=False)
    body["seed"] = args.seed
    body["config"] = hp.to_dict()
    _write_json(out / "result.json", body)
    _write_json(out / "timing.json", r.seconds)
    write_pgm(out / "query.pgm", r.query)
    write_pgm(out / "reconstruction.pgm", r.reconstruction)
    write_pgm(out / "counterfactual.pgm", r.counterfactual)
    write_pgm(out / "difference.pgm", 0.5 + 0.5 * (r.counterfactual - r.reconstruction))
    print(f"success={int(r.success)} p_query={r.prob_query:.4f} p_counterfactual={r.prob_counterfactual:.4f}")


def cmd_eval(args, hp) -> None:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise UsageError(f"--modes must be a comma list drawn from {','.join(MODES)}")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    models = load_models(args.models)
    man, _ = _load_data(args.data)
    _, x_test, y_test = load_split(man, "test", models.generator)
    _, x_ref, _ = load_split(man, "train", models.generator)
    try:
        idx = select_queries(y_test, args.n, make_rng(args.seed))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    labels = y_test[idx]
    out = evaluate_run(x_test[idx], labels, 1 - labels, modes, models, hp, seed=args.seed, reference=x_ref)
    out.report.write(args.out)
    Path(args.out, "config.txt").write_text(dump_config(hp))
    print(out.report.csv(), end="")
    if any(r["n_failed"] for r in out.report.rows):
        raise RuntimeError("some queries failed; see queries.csv")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blobcf", description="Blob-scene counterfactual explanations on phantom images.")
    p.add_argument("--config", help="key = value file of counterfactual hyperparameters")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a labelled phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-per-class", type=int, required=True)
    s.add_argument("--res", type=int, default=64)
    s.add_argument("--blobs", type=int, default=20)
    s.add_argument("--seed", type=int, default=7)

    s = sub.add_parser("train-classifier", help="fit the decision head")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=7)

    s = sub.add_parser("train-encoder", help="pretrain or finetune the encoder")
    s.add_argument("--data", required=True)
    s.add_argument("--generator", required=True)
    s.add_argument("--classifier", required=True)
    s.add_argument("--phase", choices=("pretrain", "finetune"), required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--init", help="pretrained encoder to finetune (default: --out)")
    s.add_argument("--prior", choices=("phantom", "generic"), default="phantom")

    s = sub.add_parser("invert", help="fit a scene to one image")
    s.add_argument("--image", required=True)
    s.add_argument("--models", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("explain", help="counterfactual for one image")
    s.add_argument("--image", required=True)
    s.add_argument("--target", type=int, choices=(0, 1), required=True)
    s.add_argument("--mode", choices=MODES, required=True)
    s.add_argument("--models", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=7)

    s = sub.add_parser("eval", help="batch evaluation of both modes")
    s.add_argument("--data", required=True)
    s.add_argument("--models", required=True)
    s.add_argument("--modes", default="tace,unrestricted")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=7)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        hp = load_hyperparams(args.config)
        if args.command == "synth":
            cmd_synth(args)
        elif args.command == "train-classifier":
            cmd_train_classifier(args)
        elif args.command == "train-encoder":
            cmd_train_encoder(args)
        elif args.command == "invert":
            cmd_invert(args, hp)
        elif args.command == "explain":
            cmd_explain(args, hp)
        elif args.command == "eval":
            cmd_eval(args, hp)
    except (UsageError, ConfigError) as exc:
        print(f"blobcf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, FloatingPointError, ValueError, OSError) as exc:
        print(f"blobcf: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
