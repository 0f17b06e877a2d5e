"""
MorphXAI morphological decoder.

A small DETR-style detector: convolutional backbone, sine positional
encoding, transformer encoder/decoder over learned object queries. Every
decoder layer feeds the same hidden state H^(i) into three head families:
a 3-layer box MLP, a linear species head, and one linear head per
morphological attribute. All layers are supervised during training; only
the last one is decoded at inference.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .boxes import cxcywh_to_xyxy
from .errors import ConfigError, ContractError
from .schema import SPECIES, AttributeVocabulary


PRIOR_PROB = 0.01


@dataclass
class ModelConfig:
    hidden_dim: int = 64                 # d (256 in the full preset)
    num_queries: int = 30                # Q
    num_decoder_layers: int = 3          # N
    num_encoder_layers: int = 1
    num_heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.0
    num_species: int = 3                 # C_det
    backbone_channels: Tuple[int, ...] = (16, 32, 64, 64)
    image_size: int = 256                # square training resolution
    detach_reference: bool = True        # stop gradients through per-layer box refinement

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)

    def validate(self) -> None:
        for name in ("hidden_dim", "num_queries", "num_decoder_layers", "num_heads", "ffn_dim", "image_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if self.num_species != len(SPECIES):
            raise ConfigError(f"model.num_species must be {len(SPECIES)}")
        if self.hidden_dim % 8:
            raise ConfigError("model.hidden_dim must be a multiple of 8 (sine embeddings)")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("model.hidden_dim must be divisible by model.num_heads")
        if len(self.backbone_channels) != 4:
            raise ConfigError("model.backbone_channels must list 4 stages")
        if self.num_encoder_layers < 0 or not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.num_encoder_layers >= 0 and 0 <= model.dropout < 1 required")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["backbone_channels"] = list(self.backbone_channels)
        return data


# ── Prediction containers ─────────────────────────────────────────────────────

@dataclass
class LayerPredictions:
    boxes: torch.Tensor                     # (..., Q, 4) cx, cy, w, h in [0, 1]
    class_logits: torch.Tensor              # (..., Q, C_det)
    morph_logits: Dict[str, torch.Tensor] = field(default_factory=dict)   # attr -> (..., Q, C_m)

    @property
    def num_queries(self) -> int:
        return self.boxes.shape[-2]

    def sample(self, b: int) -> "LayerPredictions":
        return LayerPredictions(
            self.boxes[b], self.class_logits[b], {k: v[b] for k, v in self.morph_logits.items()}
        )

    def permute(self, perm: torch.Tensor) -> "LayerPredictions":
        """Reorder queries (second-to-last dim)."""
        take = lambda t: t.index_select(-2, perm)
        return LayerPredictions(
            take(self.boxes), take(self.class_logits), {k: take(v) for k, v in self.morph_logits.items()}
        )


@dataclass(frozen=True)
class DenoisingQueries:
    """Noised copies of one image's ground truths, decoded as an extra group."""

    boxes: torch.Tensor             # (K, 4) jittered cx, cy, w, h
    labels: torch.Tensor            # (K,) possibly flipped species index
    target_index: torch.Tensor      # (K,) ground truth each query reconstructs


@dataclass
class ForwardOutput:
    per_layer: List[LayerPredictions]       # first -> last decoder layer
    # per image: None or (queries, per-layer predictions with batch dim 1)
    denoising: Optional[List[Optional[Tuple[DenoisingQueries, List[LayerPredictions]]]]] = None

    @property
    def final(self) -> LayerPredictions:
        return self.per_layer[-1]

    @property
    def num_layers(self) -> int:
        return len(self.per_layer)

    @property
    def batch_size(self) -> int:
        boxes = self.per_layer[0].boxes
        return boxes.shape[0] if boxes.dim() == 3 else 1

    def morphology_blocks(self) -> int:
        return sum(len(layer.morph_logits) for layer in self.per_layer)

    def split(self) -> List["ForwardOutput"]:
        """Batched output -> one ForwardOutput per sample."""
        return [
            ForwardOutput([layer.sample(b) for layer in self.per_layer]) for b in range(self.batch_size)
        ]


class AttributeCall(NamedTuple):
    value: Any
    confidence: float


@dataclass(frozen=True)
class Detection:
    box: Tuple[float, float, float, float]      # normalized x_min, y_min, x_max, y_max
    species: str
    confidence: float
    explanation: Dict[str, AttributeCall]
    query: int = -1


# ── Building blocks ───────────────────────────────────────────────────────────

def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=0.0, max=1.0)
    return torch.log(x.clamp(min=eps) / (1.0 - x).clamp(min=eps))


def sine_embed(coords: torch.Tensor, num_feats: int, temperature: float = 10000.0) -> torch.Tensor:
    """(..., k) coordinates in [0, 1] -> (..., k * num_feats) sin/cos features."""
    dim_t = torch.arange(num_feats, dtype=coords.dtype, device=coords.device)
    dim_t = temperature ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / num_feats)
    pos = coords[..., None] * (2 * math.pi) / dim_t
    pos = torch.stack([pos[..., 0::2].sin(), pos[..., 1::2].cos()], dim=-1).flatten(-2)
    return pos.flatten(-2)


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class ConvBackbone(nn.Module):
    """Four stride-2 stages of conv-GroupNorm-SiLU."""

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        stages = []
        in_ch = 3
        for out_ch in channels:
            groups = math.gcd(out_ch, 8)
            stages.append(nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False),
                nn.GroupNorm(groups, out_ch),
                nn.SiLU(),
                nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
                nn.GroupNorm(groups, out_ch),
                nn.SiLU(),
            ))
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.out_channels = in_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int, dropout: float):
        super().__init__()
        self.attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(d, ffn), nn.GELU(), nn.Dropout(dropout), nn.Linear(ffn, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, src: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        q = k = src + pos
        src = self.norm1(src + self.dropout(self.attn(q, k, src, need_weights=False)[0]))
        return self.norm2(src + self.dropout(self.ffn(src)))


class DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int, dropout: float):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(d, ffn), nn.GELU(), nn.Dropout(dropout), nn.Linear(ffn, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, tgt, query_pos, memory, memory_pos) -> torch.Tensor:
        q = k = tgt + query_pos
        tgt = self.norm1(tgt + self.dropout(self.self_attn(q, k, tgt, need_weights=False)[0]))
        attended = self.cross_attn(tgt + query_pos, memory + memory_pos, memory, need_weights=False)[0]
        tgt = self.norm2(tgt + self.dropout(attended))
        return self.norm3(tgt + self.dropout(self.ffn(tgt)))


class LayerHeads(nn.Module):
    """Box MLP, species linear head and |M| attribute linear heads for one layer."""

    def __init__(self, d: int, num_species: int, cardinalities: Dict[str, int]):
        super().__init__()
        self.box = MLP(d, d, 4, 3)
        self.cls = nn.Linear(d, num_species)
        self.morph = nn.ModuleDict({name: nn.Linear(d, c) for name, c in cardinalities.items()})
        nn.init.zeros_(self.box.layers[-1].weight)
        nn.init.zeros_(self.box.layers[-1].bias)
        nn.init.constant_(self.cls.bias, -math.log((1 - PRIOR_PROB) / PRIOR_PROB))

    def forward(self, hidden: torch.Tensor, reference: torch.Tensor, with_morphology: bool = True) -> LayerPredictions:
        boxes = torch.sigmoid(self.box(hidden) + inverse_sigmoid(reference))
        morph = {name: head(hidden) for name, head in self.morph.items()} if with_morphology else {}
        return LayerPredictions(boxes, self.cls(hidden), morph)


# ── Detector ──────────────────────────────────────────────────────────────────

class MorphologicalDetector(nn.Module):
    def __init__(self, config: ModelConfig, vocab: AttributeVocabulary):
        super().__init__()
        config.validate()
        self.config = config
        self.attribute_names = vocab.names
        self.vocab_fingerprint = vocab.fingerprint()
        d = config.hidden_dim

        self.backbone = ConvBackbone(config.backbone_channels)
        self.input_proj = nn.Conv2d(self.backbone.out_channels, d, 1)
        self.encoder = nn.ModuleList(
            EncoderLayer(d, config.num_heads, config.ffn_dim, config.dropout)
            for _ in range(config.num_encoder_layers)
        )
        self.decoder = nn.ModuleList(
            DecoderLayer(d, config.num_heads, config.ffn_dim, config.dropout)
            for _ in range(config.num_decoder_layers)
        )
        self.decoder_norm = nn.LayerNorm(d)
        # heads carry the layer index: never shared across layers
        self.heads = nn.ModuleList(
            LayerHeads(d, config.num_species, vocab.cardinalities) for _ in range(config.num_decoder_layers)
        )
        self.query_content = nn.Embedding(config.num_queries, d)
        self.reference = nn.Embedding(config.num_queries, 4)
        self.query_pos = MLP(d, d, d, 2)
        self.label_embed = nn.Embedding(config.num_species, d)
        self._init_reference()

    def _init_reference(self) -> None:
        with torch.no_grad():
            xy = torch.rand(self.config.num_queries, 2) * 0.9 + 0.05
            wh = torch.full((self.config.num_queries, 2), 0.15)
            self.reference.weight.copy_(inverse_sigmoid(torch.cat([xy, wh], dim=1)))

    # ── encoder side ──────────────────────────────────────────────────────────

    def _check_images(self, images: torch.Tensor) -> None:
        size = self.config.image_size
        if images.dim() != 4:
            raise ContractError(f"images must be B x H x W x 3, got {images.dim()} dimensions")
        if images.shape[-1] != 3:
            raise ContractError(f"channel dimension must be 3, got {images.shape[-1]}")
        if images.shape[1] != size:
            raise ContractError(f"height dimension must be {size}, got {images.shape[1]}")
        if images.shape[2] != size:
            raise ContractError(f"width dimension must be {size}, got {images.shape[2]}")

    def encode(self, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """B x H x W x 3 images -> (memory, memory_pos), both B x HW x d."""
        self._check_images(images)
        x = images.permute(0, 3, 1, 2).contiguous()
        feats = self.input_proj(self.backbone(x))
        b, d, h, w = feats.shape
        memory = feats.flatten(2).transpose(1, 2)
        ys = (torch.arange(h, dtype=memory.dtype, device=memory.device) + 0.5) / h
        xs = (torch.arange(w, dtype=memory.dtype, device=memory.device) + 0.5) / w
        grid = torch.stack(torch.meshgrid(xs, ys, indexing="xy"), dim=-1).reshape(h * w, 2)
        pos = sine_embed(grid, d // 2).unsqueeze(0).expand(b, -1, -1)
        for layer in self.encoder:
            memory = layer(memory, pos)
        return memory, pos

    # ── decoder side ──────────────────────────────────────────────────────────

    def _decode(self, tgt, reference, memory, memory_pos, with_morphology: bool) -> List[LayerPredictions]:
        d = self.config.hidden_dim
        per_layer = []
        for layer, heads in zip(self.decoder, self.heads):
            query_pos = self.query_pos(sine_embed(reference, d // 4))
            tgt = layer(tgt, query_pos, memory, memory_pos)
            pred = heads(self.decoder_norm(tgt), reference, with_morphology)
            per_layer.append(pred)
            reference = pred.boxes.detach() if self.config.detach_reference else pred.boxes
        return per_layer

    def forward(
        self,
        images: torch.Tensor,
        with_morphology: bool = True,
        denoising: Optional[Sequence[Optional[DenoisingQueries]]] = None,
    ) -> ForwardOutput:
        """B x H x W x 3 images in [0, 1] -> batched per-layer predictions.

        with_morphology=False skips the attribute heads (detector-only timing).
        denoising, one entry per image, adds the noised-query group used in training.
        """
        memory, memory_pos = self.encode(images)
        b = memory.shape[0]
        tgt = self.query_content.weight.unsqueeze(0).expand(b, -1, -1)
        reference = self.reference.weight.sigmoid().unsqueeze(0).expand(b, -1, -1)
        output = ForwardOutput(self._decode(tgt, reference, memory, memory_pos, with_morphology))
        if denoising is not None:
            if len(denoising) != b:
                raise ContractError(f"{len(denoising)} denoising groups for a batch of {b}")
            output.denoising = [
                None if group is None or group.labels.numel() == 0 else (
                    group,
                    self.forward_denoising(
                        memory[i:i + 1], memory_pos[i:i + 1], group.boxes[None], group.labels[None]
                    ),
                )
                for i, group in enumerate(denoising)
            ]
        return output

    def forward_denoising(
        self, memory: torch.Tensor, memory_pos: torch.Tensor, boxes: torch.Tensor, labels: torch.Tensor
    ) -> List[LayerPredictions]:
        """Decode noised ground-truth queries (1 x K) as their own group."""
        tgt = self.label_embed(labels)
        return self._decode(tgt, boxes.clamp(0.0, 1.0), memory, memory_pos, with_morphology=True)

    @torch.no_grad()
    def detect(
        self, images: torch.Tensor, vocab: AttributeVocabulary, score_threshold: float
    ) -> List[List[Detection]]:
        was_training = self.training
        self.eval()
        try:
            output = self(images)
        finally:
            self.train(was_training)
        return [decode_predictions(sample.final, vocab, score_threshold) for sample in output.split()]


def decode_predictions(
    final: LayerPredictions,
    vocab: AttributeVocabulary,
    score_threshold: float,
    species: Sequence[str] = SPECIES,
) -> List[Detection]:
    """Final-layer predictions of one image -> detections sorted by confidence.

    Species and attribute values are the argmax of the raw logits, ties to the
    lowest index. Confidences are the per-class sigmoid (species) or softmax
    probability (attributes) at that index.
    """
    missing = [name for name in vocab.names if name not in final.morph_logits]
    if missing:
        raise ContractError(f"final layer lacks attribute logits for {', '.join(missing)}")
    boxes = cxcywh_to_xyxy(final.boxes.detach().double()).clamp(0.0, 1.0).cpu().numpy()
    class_logits = final.class_logits.detach().double().cpu()
    logits, probs = class_logits.numpy(), torch.sigmoid(class_logits).numpy()
    attr_logits = {name: final.morph_logits[name].detach().double().cpu() for name in vocab.names}
    attr_probs = {name: torch.softmax(value, dim=-1).numpy() for name, value in attr_logits.items()}
    detections = []
    for q in range(probs.shape[0]):
        k = int(np.argmax(logits[q]))
        confidence = float(probs[q, k])
        if confidence < score_threshold:
            continue
        explanation = {}
        for name in vocab.names:
            i = int(np.argmax(attr_logits[name][q].numpy()))
            explanation[name] = AttributeCall(vocab.decode(name, i), float(attr_probs[name][q, i]))
        detections.append(Detection(
            box=tuple(float(v) for v in boxes[q]),
            species=species[k],
            confidence=confidence,
            explanation=explanation,
            query=q,
        ))
    detections.sort(key=lambda det: -det.confidence)
    return detections


def build_model(config: ModelConfig, vocab: AttributeVocabulary) -> MorphologicalDetector:
    return MorphologicalDetector(config, vocab)
