"""
Training loop.

Each step takes a batch of images; for every image: augment, embed the image
and its mirror, score class names and sampled concepts against the pixel
embeddings, evaluate the three losses and backpropagate into the encoder and
the textual path. Parameters are updated with poly-decayed SGD.

Randomness is split into independent streams (init, augmentation, concept
sampling, shuffling) so runs that differ only in loss weights see the same
images and concepts in the same order.
"""

import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

# Import sibling modules
sys.path.insert(0, str(Path(__file__).parent))
from caption_parser import ClassVocabulary, Lexicon, ParsedImage, Snippet, SnippetKind
from config import RunConfig
from errors import AllTokensOOV, CheckpointError, CorpusError, MissingPairs, NumericError
from losses import (
    ConceptBatch,
    LossValue,
    LossWeights,
    auto_consistency_loss_with_labels,
    class_loss,
    concepts_loss,
    consistency_pseudo_labels,
    sample_contrastive,
    total_loss,
)
from shapes_dataset import augment, flip_image
from storage import RunWriter, load_checkpoint
from text_embedding import (
    SnippetBank,
    TextualPathParams,
    init_textual_path,
    textual_path_backward,
    textual_path_batch,
)
from toy_encoder import EncoderConfig, PixelEncoder, init_encoder_params, param_lr, sgd_step

logger = logging.getLogger(__name__)

M_TXT = "M_txt"


@dataclass
class TamModel:
    """Pixel encoder plus textual path: everything a checkpoint holds."""

    encoder: PixelEncoder
    text: TextualPathParams

    def tensors(self) -> Dict[str, np.ndarray]:
        tensors = dict(self.encoder.params)
        tensors[M_TXT] = self.text.M_txt
        return tensors

    def update(self, tensors: Dict[str, np.ndarray]) -> None:
        self.text = TextualPathParams(tensors[M_TXT], self.text.w_res)
        self.encoder.params = {k: v for k, v in tensors.items() if k != M_TXT}

    def meta(self) -> Dict[str, Any]:
        config = self.encoder.config
        return {
            "dim": config.dim,
            "hidden_channels": list(config.hidden_channels),
            "in_channels": config.in_channels,
            "kernel_size": config.kernel_size,
            "w_res": self.text.w_res,
        }

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray], meta: Dict[str, Any]) -> "TamModel":
        try:
            config = EncoderConfig(
                in_channels=int(meta["in_channels"]),
                hidden_channels=tuple(int(c) for c in meta["hidden_channels"]),
                dim=int(meta["dim"]),
                kernel_size=int(meta["kernel_size"]),
            )
            w_res = float(meta["w_res"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"checkpoint metadata incomplete: {e}")
        if M_TXT not in tensors:
            raise CheckpointError("checkpoint has no textual path weights")
        encoder_params = {k: v for k, v in tensors.items() if k != M_TXT}
        return cls(PixelEncoder(config, encoder_params), TextualPathParams(tensors[M_TXT], w_res))


def load_model(path: Path) -> Tuple[TamModel, Dict[str, Any]]:
    tensors, meta = load_checkpoint(path)
    return TamModel.from_tensors(tensors, meta), meta


@dataclass
class TrainingData:
    vocab: ClassVocabulary
    lexicon: Lexicon
    bank: SnippetBank
    parsed: List[ParsedImage]
    images: Dict[str, np.ndarray]

    def __post_init__(self):
        missing = [p.image_id for p in self.parsed if p.image_id not in self.images]
        if missing:
            raise MissingPairs(f"no image for captioned ids {missing[:5]}")


@dataclass(frozen=True)
class LossSettings:
    weights: LossWeights = field(default_factory=LossWeights)
    alpha: float = 4.0
    ac_form: str = "logsigmoid"


def class_name_inputs(vocab: ClassVocabulary, bank: SnippetBank) -> np.ndarray:
    """Input embeddings of each class's singular name, K x dim."""
    rows = []
    for entry in vocab:
        tokens = entry.forms[0]
        vector = bank.get(Snippet(tokens, SnippetKind.CLASS_NAME, frozenset([entry.class_id])))
        if vector is None:
            raise AllTokensOOV(tokens)
        rows.append(vector)
    return np.vstack(rows)


def filter_batch(batch: ConceptBatch, bank: SnippetBank) -> ConceptBatch:
    return ConceptBatch(tuple(bank.filter(batch.present)), tuple(bank.filter(batch.contrastive)))


@dataclass
class ImageLoss:
    value: LossValue
    grads: Dict[str, np.ndarray]
    # pseudo-labels used by the auto-consistency term, None when it was skipped
    pseudo_labels: Optional[Tuple[np.ndarray, np.ndarray]] = None


def compute_image_loss(
    model: TamModel,
    image: np.ndarray,
    tags: Set[int],
    class_inputs: np.ndarray,
    batch: ConceptBatch,
    concept_inputs: np.ndarray,
    settings: LossSettings,
    pseudo_labels: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> ImageLoss:
    """
    Loss and parameter gradients for one image.

    class_inputs holds e_w2v of every vocabulary class name (K x dim);
    concept_inputs holds e_w2v of batch.snippets() in order. Passing
    pseudo_labels fixes the auto-consistency targets instead of deriving
    them from the current maps.
    """
    H, W = image.shape[:2]
    P = H * W
    weights = settings.weights

    E, cache = model.encoder.forward_with_cache(image)
    e_cls, cls_cache = textual_path_batch(class_inputs, model.text)

    X = E.data @ e_cls.T
    l_cls, g_pooled = class_loss(X.mean(axis=0), tags)
    gX = np.broadcast_to(g_pooled / P, X.shape)
    grads_cls = {"E": gX @ e_cls, "e_cls": gX.T @ E.data}

    l_cpt = 0.0
    grads_cpt: Dict[str, np.ndarray] = {}
    cpt_cache = None
    if len(batch) > 0:
        e_cpt, cpt_cache = textual_path_batch(concept_inputs, model.text)
        Xc = E.data @ e_cpt.T
        l_cpt, g_c = concepts_loss(Xc.mean(axis=0), batch)
        gXc = np.broadcast_to(g_c / P, Xc.shape)
        grads_cpt = {"E": gXc @ e_cpt, "e_cpt": gXc.T @ E.data}

    l_ac = 0.0
    grads_ac: Dict[str, np.ndarray] = {}
    cache_f = None
    used_labels = None
    present = sorted(tags)
    if present and weights.lambda_ac > 0:
        E_f, cache_f = model.encoder.forward_with_cache(flip_image(image))
        e_present = e_cls[present]
        tams = X[:, present]
        tams_f = E_f.data @ e_present.T
        used_labels = pseudo_labels
        if used_labels is None:
            used_labels = (
                consistency_pseudo_labels(tams, H, W, settings.alpha),
                consistency_pseudo_labels(tams_f, H, W, settings.alpha),
            )
        l_ac, g_t, g_tf = auto_consistency_loss_with_labels(
            tams, tams_f, used_labels[0], used_labels[1], H, W, settings.ac_form
        )
        g_e_cls = np.zeros_like(e_cls)
        g_e_cls[present] = g_t.T @ E.data + g_tf.T @ E_f.data
        grads_ac = {"E": g_t @ e_present, "E_f": g_tf @ e_present, "e_cls": g_e_cls}

    value = total_loss((l_cls, l_cpt, l_ac), weights, (grads_cls, grads_cpt, grads_ac))

    grads = model.encoder.backward(value.gradients["E"], cache)
    if "E_f" in value.gradients:
        for name, g in model.encoder.backward(value.gradients["E_f"], cache_f).items():
            grads[name] = grads[name] + g
    grad_M = textual_path_backward(value.gradients["e_cls"], cls_cache, model.text)
    if "e_cpt" in value.gradients:
        grad_M = grad_M + textual_path_backward(value.gradients["e_cpt"], cpt_cache, model.text)
    grads[M_TXT] = grad_M
    return ImageLoss(value, grads, used_labels)


@dataclass
class TrainResult:
    model: TamModel
    log: List[Dict[str, Any]] = field(default_factory=list)
    steps: int = 0


def init_model(config: RunConfig, dim: int, rng: np.random.Generator) -> TamModel:
    encoder_config = config.encoder_config(dim=dim)
    encoder = PixelEncoder(encoder_config, init_encoder_params(encoder_config, rng))
    text = init_textual_path(dim, config.w_res, rng=rng)
    return TamModel(encoder, text)


def train(data: TrainingData, config: RunConfig, writer: Optional[RunWriter] = None) -> TrainResult:
    """
    Train a model; with a writer, the log and a checkpoint are written after
    every epoch. A non-finite loss or update aborts the run, leaving the last
    completed epoch's checkpoint in place.
    """
    train_config = config.train_config()
    policy = config.augmentation()
    settings = LossSettings(config.loss_weights(), config.alpha, config.ac_form)

    init_seq, aug_seq, sample_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(4)
    init_rng = np.random.default_rng(init_seq)
    aug_rng = np.random.default_rng(aug_seq)
    sample_rng = np.random.default_rng(sample_seq)
    shuffle_rng = np.random.default_rng(shuffle_seq)

    model = init_model(config, data.bank.dim, init_rng)
    class_inputs = class_name_inputs(data.vocab, data.bank)

    n = len(data.parsed)
    if n == 0:
        raise CorpusError("training corpus is empty")
    steps_per_epoch = math.ceil(n / train_config.batch_size)
    total_steps = train_config.epochs * steps_per_epoch
    result = TrainResult(model)
    step = 0

    logger.info(
        "Training on %d images: %d epochs, %d steps, weights cls=%g cpt=%g ac=%g",
        n, train_config.epochs, total_steps, *settings.weights.as_tuple(),
    )

    try:
        for epoch in range(train_config.epochs):
            order = shuffle_rng.permutation(n)
            epoch_rows = []
            for start in range(0, n, train_config.batch_size):
                members = order[start:start + train_config.batch_size]
                summed: Dict[str, np.ndarray] = {}
                parts = np.zeros(4)
                for index in members:
                    parsed = data.parsed[index]
                    image = augment(data.images[parsed.image_id], policy, aug_rng)
                    batch = filter_batch(
                        sample_contrastive(
                            data.parsed,
                            parsed.image_id,
                            sample_rng,
                            lexicon=data.lexicon,
                            concept_mode=config.concept_mode,
                            max_present=config.max_present_concepts,
                            num_images=config.contrastive_images,
                            num_concepts=config.contrastive_concepts,
                        ),
                        data.bank,
                    )
                    loss = compute_image_loss(
                        model,
                        image,
                        parsed.tags,
                        class_inputs,
                        batch,
                        data.bank.matrix(batch.snippets()),
                        settings,
                    )
                    parts += (loss.value.cls, loss.value.cpt, loss.value.ac, loss.value.total)
                    for name, g in loss.grads.items():
                        summed[name] = summed[name] + g if name in summed else g.copy()

                count = len(members)
                grads = {name: g / count for name, g in summed.items()}
                updated = sgd_step(model.tensors(), grads, step, train_config, total_steps)
                model.update(updated)

                cls, cpt, ac, total = parts / count
                row = {
                    "step": step,
                    "epoch": epoch,
                    "lr": param_lr("conv1.weight", step, total_steps, train_config),
                    "loss_cls": float(cls),
                    "loss_cpt": float(cpt),
                    "loss_ac": float(ac),
                    "loss_total": float(total),
                }
                result.log.append(row)
                epoch_rows.append(row)
                step += 1

            mean_total = float(np.mean([r["loss_total"] for r in epoch_rows]))
            logger.info("[%d/%d] mean loss %.4f", epoch + 1, train_config.epochs, mean_total)
            if writer is not None:
                writer.write_train_log(result.log)
                meta = model.meta()
                meta["epoch"] = epoch + 1
                meta["classes"] = data.vocab.names()
                writer.write_checkpoint(model.tensors(), meta)
    except NumericError:
        if writer is not None:
            writer.write_train_log(result.log)
        logger.error("Training aborted at step %d: non-finite loss or update", step)
        raise

    result.steps = step
    return result


def moving_average(values: Sequence[float], window: int = 10) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return values.copy()
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")
