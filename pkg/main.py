import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from streams.adh import AttributeDecomposeHead, adh_forward, export_attention
from streams.backbone import BackboneConfig, TwoStreamBackbone
from streams.distances import (DistanceDecomposition, attribute_distances, decompose_pairs, decomposition_frame,
                               explanation_bank, explanation_summary, export_decomposition)
from streams.losses import LossConfig, metric_distillation
from streams.trainer import TrainConfig, TrainingResult, train_stream1, train_stream2
from utils.attributes import AttributeSchema, pairwise_xor
from utils.dataset import DatasetManifest, ReIDDataset, SplitResult, load_image, load_manifest, split_protocol
from utils.errors import ConfigError, MissingArtifact, ReIDError
from utils.ranking import (DIRECTIONS, GALLERY_MODES, EvaluationReport, direction_filter, evaluate, verify_with_oracle,
                           write_reports)
from utils.settings import load_settings, write_config_echo
from utils.synthetic import AerialTransform, SyntheticSpec, generate_synthetic, write_synthetic
from utils.tensor import ActivationParams
from utils.tensor_io import load_checkpoint

LOG_ENV = "ATTRIB_REID_LOG"
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def configure_logging():
    """Root logger at the level named by ATTRIB_REID_LOG (default INFO)"""
    name = os.getenv(LOG_ENV, "INFO").upper()
    level = logging.getLevelName(name)
    known = isinstance(level, int)
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(format=LOG_FORMAT)
    root.setLevel(level if known else logging.INFO)
    if not known:
        logger.warning(f"Unknown {LOG_ENV} value {name!r}, using INFO")


def attach_run_log(directory: Path) -> logging.Handler:
    handler = logging.FileHandler(directory / "run.log", mode="w")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def manifest_path(data: Path) -> Path:
    return data / "manifest.csv" if data.is_dir() else data


class ReIDPipeline:
    """synth / train / eval / explain over one resolved settings dict"""

    def __init__(self, settings: Dict[str, Any]):
        self.settings = settings
        self.seed = int(settings["seed"])
        self.threads = max(1, int(settings["threads"]))

    # --- builders ---
    def schema_for(self, data_dir: Optional[Path] = None) -> AttributeSchema:
        if self.settings.get("schema"):
            return AttributeSchema.from_file(self.settings["schema"])
        if data_dir is not None and (data_dir / "schema.txt").exists():
            return AttributeSchema.from_file(data_dir / "schema.txt")
        return AttributeSchema.default()

    def synthetic_spec(self) -> SyntheticSpec:
        s = self.settings["synthetic"]
        return SyntheticSpec(
            id_count=int(s["ids"]),
            images_per_id_per_platform=int(s["images_per_id_per_platform"]),
            image_size=(int(s["image_height"]), int(s["image_width"])),
            noise_level=float(s["noise_level"]),
            aerial_transform=AerialTransform(float(s["aerial_downscale"]), float(s["aerial_squash"]),
                                             float(s["aerial_brightness"])),
            seed=self.seed,
            cameras_per_platform=int(s["cameras_per_platform"]),
            image_format=str(s["image_format"]),
        )

    def activation(self) -> ActivationParams:
        a = self.settings["activation"]
        return ActivationParams(K=float(a["k"]), T=float(a["t"]))

    def loss_config(self) -> LossConfig:
        l = self.settings["loss"]
        return LossConfig(alpha=float(l["alpha"]), beta=float(l["beta"]), v=float(l["v"]),
                          margin=float(l["margin"]), lambda_variant=str(l["lambda_variant"]))

    def train_config(self, phase: str, pooling: Optional[dict] = None) -> TrainConfig:
        section = self.settings["train" if phase == "stream1" else "stream2"]
        pooling = pooling or self.settings["pooling"]
        return TrainConfig(
            phase=phase,
            optimizer=str(section["optimizer"]),
            learning_rate=float(section["learning_rate"]),
            momentum=float(section["momentum"]),
            epochs=int(section["epochs"]),
            batch_size=int(self.settings["train"]["batch_size"]),
            instances_per_id=int(self.settings["train"]["instances_per_id"]),
            ids_per_batch=int(self.settings["stream2"]["ids_per_batch"]),
            seed=self.seed,
            freeze_shared=bool(self.settings["stream2"]["freeze_shared"]),
            gem_p=float(pooling["gem_p"]),
            stream1_gem_p=None if pooling.get("stream1_gem_p") is None else float(pooling["stream1_gem_p"]),
            eps=float(pooling["eps"]),
        )

    def backbone_config(self, image_shape: Tuple[int, int, int], id_count: int) -> BackboneConfig:
        b = self.settings["backbone"]
        return BackboneConfig(
            stages=tuple(tuple(s) for s in b["stages"]),
            input_shape=image_shape,
            shared_stage_count=b.get("shared_stages"),
            id_count=id_count,
            seed=self.seed,
            stream2_init=str(b["stream2_init"]),
        )

    def load_data(self, data: Path) -> Tuple[DatasetManifest, ReIDDataset, SplitResult]:
        path = manifest_path(data)
        if not path.exists():
            raise MissingArtifact("dataset manifest", path)
        split_cfg = self.settings["split"]
        schema = self.schema_for(path.parent)
        manifest = load_manifest(path, schema=schema, exclusions_path=split_cfg.get("exclusions"))
        dataset = ReIDDataset.from_manifest(manifest, schema)
        split = split_protocol(manifest, float(split_cfg["train_fraction"]), self.seed,
                               int(split_cfg["queries_per_platform"]))
        return manifest, dataset, split

    def load_stream1(self, path: Path) -> Tuple[TwoStreamBackbone, dict]:
        params, config = load_checkpoint(path)
        if config.get("phase") != "stream1":
            raise MissingArtifact("Stream-1 checkpoint", path)
        backbone = TwoStreamBackbone(BackboneConfig.from_dict(config["backbone"]))
        backbone.load_state_dict(params)
        backbone.reset_stream2()
        return backbone, config

    def load_stream2(self, backbone: TwoStreamBackbone, path: Path) -> Tuple[AttributeDecomposeHead, dict]:
        params, config = load_checkpoint(path)
        if config.get("phase") != "stream2":
            raise MissingArtifact("Stream-2 checkpoint", path)
        activation = ActivationParams(K=float(config["activation"]["k"]), T=float(config["activation"]["t"]))
        head = AttributeDecomposeHead(backbone.config.channels, int(config["adh"]["attribute_count"]), activation,
                                      seed=self.seed, init=str(config["adh"]["init"]))
        head.load_state_dict({n: v for n, v in params.items() if n.startswith("adh.")})
        backbone.load_state_dict({n: v for n, v in params.items() if not n.startswith("adh.")})
        return head, config

    # --- subcommands ---
    def cmd_synth(self, out: Path) -> Path:
        """Generate the procedural dataset into `out`"""
        dataset = generate_synthetic(self.synthetic_spec(), self.schema_for(), threads=self.threads)
        return write_synthetic(dataset, out)

    def cmd_train(self, data: Path, out: Path, phase: str, stream1: Optional[Path] = None) -> TrainingResult:
        """Train Stream 1, or Stream 2 on top of a Stream-1 checkpoint"""
        stream1 = stream1 or out / "stream1"
        if phase == "stream2" and not (stream1 / "manifest.yaml").exists():
            raise MissingArtifact("Stream-1 checkpoint (run `train --phase stream1` first)", stream1)
        _, dataset, split = self.load_data(data)
        train_rows = dataset.records[dataset.records["person_id"].isin(split.train_ids)]
        train_set = dataset.subset(train_rows).relabel()
        write_split(out / "split.csv", split)
        loss_config = self.loss_config()

        if phase == "stream1":
            backbone = TwoStreamBackbone(self.backbone_config(dataset.image_shape, len(split.train_ids)))
            return train_stream1(train_set, backbone, self.train_config("stream1"), out, margin=loss_config.margin)

        backbone, ckpt = self.load_stream1(stream1)
        shared = self.settings["backbone"].get("shared_stages")
        if shared is not None and int(shared) != backbone.config.shared_stage_count:
            raise ConfigError(f"--shared-stages {shared} differs from the Stream-1 checkpoint "
                              f"({backbone.config.shared_stage_count})")
        adh_init = str(self.settings["adh"]["init"])
        head = AttributeDecomposeHead(backbone.config.channels, train_set.attributes.shape[1], self.activation(),
                                      seed=self.seed, init=adh_init)
        config = self.train_config("stream2", pooling=self.checkpoint_pooling(ckpt))
        return train_stream2(train_set, backbone, head, config, loss_config, out, adh_init=adh_init)

    def checkpoint_pooling(self, ckpt: dict) -> dict:
        """Pooling recorded in a checkpoint; a differing pooling.gem_p setting is ignored with a warning"""
        pooling = ckpt.get("pooling") or self.settings["pooling"]
        requested = float(self.settings["pooling"]["gem_p"])
        if requested != float(pooling["gem_p"]):
            logger.warning(f"pooling.gem_p {requested:g} ignored: the {ckpt.get('phase', 'loaded')} checkpoint "
                           f"pools with p={float(pooling['gem_p']):g}")
        return pooling

    def cmd_eval(self, data: Path, out: Path, stream1: Path, direction: str, gallery_mode: str,
                 oracle: bool = False, per_query: bool = False, stream2: Optional[Path] = None,
                 distances: bool = False) -> List[EvaluationReport]:
        """Rank the test split's queries against its gallery with Stream-1 embeddings.

        With `stream2` the same split is also ranked by the Stream-2 run's
        weights (they differ from the baseline only when the shared stages were
        unfrozen) and every held-out cross-platform pair is decomposed.
        """
        _, dataset, split = self.load_data(data)
        query_set, gallery_set = dataset.subset(split.query), dataset.subset(split.gallery)
        directions = ["a2g", "g2a"] if direction == "both" else [direction]
        backbone, ckpt = self.load_stream1(stream1)
        models = [("baseline", backbone, ckpt)]
        if stream2 is not None:
            if not (stream2 / "manifest.yaml").exists():
                raise MissingArtifact("Stream-2 checkpoint", stream2)
            explainable, _ = self.load_stream1(stream1)
            head, ckpt2 = self.load_stream2(explainable, stream2)
            if ckpt2.get("freeze_shared", True):
                logger.info("Stream 2 kept the shared stages frozen, so both models rank alike")
            models.append(("explainable", explainable, ckpt2))

        reports = []
        for model, net, model_ckpt in models:
            pooling = self.checkpoint_pooling(model_ckpt)
            p = float(pooling["gem_p"] if pooling.get("stream1_gem_p") is None else pooling["stream1_gem_p"])
            eps = float(pooling["eps"])
            q_emb = net.embed_images(query_set.images, p, eps)
            g_emb = net.embed_images(gallery_set.images, p, eps)
            for name in directions:
                report = evaluate(query_set.records, gallery_set.records, q_emb, g_emb, name, gallery_mode,
                                  threads=self.threads, model=model)
                if oracle:
                    verify_with_oracle(report, query_set.records, gallery_set.records, q_emb, g_emb, self.threads)
                reports.append(report)
        write_reports(out, reports, per_query=per_query, distances=distances)
        if stream2 is not None:
            self.explain_held_out(out, explainable, head, ckpt2, query_set, gallery_set, directions)
        return reports

    def explain_held_out(self, out: Path, backbone: TwoStreamBackbone, head: AttributeDecomposeHead, ckpt: dict,
                         query_set: ReIDDataset, gallery_set: ReIDDataset, directions: List[str]) -> pd.DataFrame:
        """decomposition_pairs.csv over every cross-platform query×gallery pair, plus a per-direction summary"""
        pooling = ckpt.get("pooling") or self.settings["pooling"]
        images = np.concatenate([query_set.images, gallery_set.images])
        reid_maps, attention = explanation_bank(backbone, head, images)
        bits = np.concatenate([query_set.attributes, gallery_set.attributes])
        offset = len(query_set)
        queries = query_set.records.assign(_row=np.arange(offset))
        gallery = gallery_set.records.assign(_row=offset + np.arange(len(gallery_set)))
        image_ids = np.concatenate([queries["image_id"].to_numpy(), gallery["image_id"].to_numpy()])
        person_ids = np.concatenate([queries["person_id"].to_numpy(), gallery["person_id"].to_numpy()])
        frames, summaries = [], []
        for name in directions:
            q, g = direction_filter(queries, gallery, name, "cross")
            left, right = np.repeat(q["_row"].to_numpy(), len(g)), np.tile(g["_row"].to_numpy(), len(q))
            keep = np.repeat(q["platform"].to_numpy(), len(g)) != np.tile(g["platform"].to_numpy(), len(q))
            left, right = left[keep], right[keep]
            decompositions = decompose_pairs(reid_maps, attention, bits, left, right,
                                             p=float(pooling["gem_p"]), eps=float(pooling["eps"]),
                                             stream1_p=pooling.get("stream1_gem_p"))
            frame = decomposition_frame(decompositions)
            frame.insert(0, "direction", name)
            frame.insert(1, "query_id", image_ids[left])
            frame.insert(2, "gallery_id", image_ids[right])
            frame.insert(3, "same_identity", (person_ids[left] == person_ids[right]).astype(int))
            frames.append(frame)
            summary = {"direction": name, **explanation_summary(frame)}
            summaries.append(summary)
            logger.info(f"{name}: {summary['pairs']} pairs, mean relative gap {summary['mean_relative_gap']:.4f}, "
                        f"exclusive share above proportional in {summary['exclusive_dominant_fraction']:.2%} "
                        f"of {summary['informative_pairs']} informative pairs")
        pairs = pd.concat(frames, ignore_index=True)
        pairs.to_csv(out / "decomposition_pairs.csv", index=False, float_format="%.10g")
        pd.DataFrame(summaries).to_csv(out / "explanation_summary.csv", index=False, float_format="%.10g")
        return pairs

    def cmd_explain(self, data: Path, out: Path, query_id: str, gallery_id: str,
                    stream1: Path, stream2: Path) -> DistanceDecomposition:
        """Attention maps and per-attribute distance shares for one image pair"""
        path = manifest_path(data)
        schema = self.schema_for(path.parent)
        manifest = load_manifest(path, schema=schema)
        query_row, gallery_row = manifest.record(query_id), manifest.record(gallery_id)
        backbone, ckpt1 = self.load_stream1(stream1)
        if not (stream2 / "manifest.yaml").exists():
            raise MissingArtifact("Stream-2 checkpoint", stream2)
        head, ckpt2 = self.load_stream2(backbone, stream2)
        pooling = self.checkpoint_pooling(ckpt2 if ckpt2.get("pooling") else ckpt1)

        images = [load_image(manifest.root / row["image_path"]) for row in (query_row, gallery_row)]
        ids = [query_id, gallery_id]
        reid = [backbone.forward_reid(img, i) for img, i in zip(images, ids)]
        explain = [backbone.forward_explainable(img, i) for img, i in zip(images, ids)]
        attention = [adh_forward(f, head) for f in explain]
        names = schema.dimension_names()
        for image_id, maps in zip(ids, attention):
            export_attention(out, image_id, maps, names)

        pair = pairwise_xor(schema.encode(manifest.attribute_table[query_row["person_id"]]),
                            schema.encode(manifest.attribute_table[gallery_row["person_id"]]))
        decomposition = attribute_distances(reid[0], reid[1], attention[0], attention[1],
                                            p=float(pooling["gem_p"]), eps=float(pooling["eps"]), pair=pair,
                                            stream1_p=pooling.get("stream1_gem_p"))
        export_decomposition(out / "decomposition.csv", decomposition, names)
        degenerate = decomposition.degenerate
        summary = pd.DataFrame([{
            "query_id": query_id,
            "gallery_id": gallery_id,
            "d": decomposition.d,
            "d_hat": decomposition.d_hat,
            "L_d": metric_distillation(decomposition.d, decomposition.d_k),
            "M_E": pair.exclusive_count,
            "exclusive_share": decomposition.exclusive_share,
            "relative_gap": decomposition.relative_gap,
            "degenerate": int(degenerate),
        }])
        summary.to_csv(out / "pair.csv", index=False, float_format="%.10g")
        if degenerate:
            logger.warning(f"{query_id} vs {gallery_id}: degenerate pair, shares reported as given")
        logger.info(f"{query_id} vs {gallery_id}: d {decomposition.d:.4f}, d_hat {decomposition.d_hat:.4f}, "
                    f"{pair.exclusive_count} exclusive attributes")
        return decomposition


def write_split(path: Path, split: SplitResult):
    rows = [(pid, "train") for pid in split.train_ids] + [(pid, "test") for pid in split.test_ids]
    rows += [(pid, "excluded") for pid in split.excluded]
    pd.DataFrame(rows, columns=["person_id", "subset"]).to_csv(path, index=False)


# flag dest -> dotted config key
FLAG_KEYS = {
    "seed": "seed",
    "threads": "threads",
    "schema": "schema",
    "ids": "synthetic.ids",
    "images_per_id": "synthetic.images_per_id_per_platform",
    "noise": "synthetic.noise_level",
    "image_format": "synthetic.image_format",
    "cameras": "synthetic.cameras_per_platform",
    "height": "synthetic.image_height",
    "width": "synthetic.image_width",
    "gem_p": "pooling.gem_p",
    "activation_k": "activation.k",
    "activation_t": "activation.t",
    "alpha": "loss.alpha",
    "beta": "loss.beta",
    "v": "loss.v",
    "margin": "loss.margin",
    "lambda_variant": "loss.lambda_variant",
    "shared_stages": "backbone.shared_stages",
    "adh_init": "adh.init",
    "gallery_mode": "evaluation.gallery_mode",
    "direction": "evaluation.direction",
    "exclusions": "split.exclusions",
}
PHASE_FLAGS = {"epochs": "epochs", "lr": "learning_rate", "optimizer": "optimizer"}


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {key: getattr(args, dest) for dest, key in FLAG_KEYS.items() if hasattr(args, dest)}
    if getattr(args, "phase", None):
        section = "train" if args.phase == "stream1" else "stream2"
        overrides.update({f"{section}.{key}": getattr(args, dest) for dest, key in PHASE_FLAGS.items()})
    if getattr(args, "unfreeze_shared", False):
        overrides["stream2.freeze_shared"] = False
    return overrides


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, type=Path, help="output directory")
    common.add_argument("--config", type=Path, help="YAML overlay on config.yaml")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--schema", help="attribute schema file (name,cardinality per line)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--data", required=True, type=Path, help="dataset directory or manifest.csv")
    model.add_argument("--stream1", type=Path, help="Stream-1 checkpoint directory")
    model.add_argument("--gem-p", dest="gem_p", type=float)
    model.add_argument("--exclusions", help="identity exclusion list, one person_id per line")

    parser = argparse.ArgumentParser(description="Attribute-guided explainable aerial-ground person re-ID")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    synth.add_argument("--ids", type=int)
    synth.add_argument("--images-per-id", dest="images_per_id", type=int)
    synth.add_argument("--noise", type=float)
    synth.add_argument("--cameras", type=int)
    synth.add_argument("--height", type=int, help="image height in pixels")
    synth.add_argument("--width", type=int, help="image width in pixels")
    synth.add_argument("--image-format", dest="image_format", choices=["png", "atrt"])

    train = sub.add_parser("train", parents=[common, model], help="train Stream 1 or Stream 2")
    train.add_argument("--phase", choices=["stream1", "stream2"], default="stream1")
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--optimizer", choices=["adam", "sgd"])
    train.add_argument("--activation-k", dest="activation_k", type=float)
    train.add_argument("--activation-t", dest="activation_t", type=float)
    train.add_argument("--alpha", type=float)
    train.add_argument("--beta", type=float)
    train.add_argument("--v", type=float)
    train.add_argument("--margin", type=float)
    train.add_argument("--lambda-variant", dest="lambda_variant", choices=["as_printed", "grouped"])
    train.add_argument("--shared-stages", dest="shared_stages", type=int)
    train.add_argument("--adh-init", dest="adh_init", choices=["uniform_share", "random"])
    train.add_argument("--unfreeze-shared", dest="unfreeze_shared", action="store_true",
                       help="let Stream-2 training update the shared stages")

    ev = sub.add_parser("eval", parents=[common, model], help="mAP / CMC report")
    ev.add_argument("--direction", choices=sorted(DIRECTIONS) + ["both"])
    ev.add_argument("--gallery-mode", dest="gallery_mode", choices=list(GALLERY_MODES))
    ev.add_argument("--oracle", action="store_true", help="cross-check metrics with the brute-force oracle")
    ev.add_argument("--per-query", dest="per_query", action="store_true", help="also write per_query_ap.csv")
    ev.add_argument("--stream2", type=Path,
                    help="Stream-2 checkpoint: rank with its weights too and decompose held-out pairs")
    ev.add_argument("--export-distances", dest="export_distances", action="store_true",
                    help="also write distmat_<model>_<direction>.csv")

    explain = sub.add_parser("explain", parents=[common, model], help="explain one query/gallery pair")
    explain.add_argument("--query", required=True, help="query image id")
    explain.add_argument("--gallery", required=True, help="gallery image id")
    explain.add_argument("--stream2", type=Path, help="Stream-2 checkpoint directory")
    return parser


def dispatch(args: argparse.Namespace, settings: Dict[str, Any]) -> None:
    out: Path = args.out
    write_config_echo(settings, out)
    pipeline = ReIDPipeline(settings)
    logger.info(f"Running {args.command} into {out}")
    if args.command == "synth":
        pipeline.cmd_synth(out)
    elif args.command == "train":
        pipeline.cmd_train(args.data, out, args.phase, args.stream1)
    elif args.command == "eval":
        stream1 = args.stream1 or out / "stream1"
        pipeline.cmd_eval(args.data, out, stream1, settings["evaluation"]["direction"],
                          settings["evaluation"]["gallery_mode"], args.oracle, args.per_query, args.stream2,
                          args.export_distances)
    elif args.command == "explain":
        stream1 = args.stream1 or out / "stream1"
        stream2 = args.stream2 or stream1.parent / "stream2"
        pipeline.cmd_explain(args.data, out, args.query, args.gallery, stream1, stream2)


def main(argv: Optional[List[str]] = None) -> int:
    """Exit codes: 0 success, 1 runtime failure, 2 usage error"""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging()
    handler = None
    try:
        settings = load_settings(args.config, collect_overrides(args))
        args.out.mkdir(parents=True, exist_ok=True)
        handler = attach_run_log(args.out)
        dispatch(args, settings)
    except (ReIDError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()
    return 0


if __name__ == '__main__':
    sys.exit(main())
