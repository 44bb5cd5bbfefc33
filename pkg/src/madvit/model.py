"""The full classifier: stem -> local attention branches -> token encoder.

One forward call processes a whole batch as a single recorded graph. Drop
decisions are drawn per sample, so within a mini-batch different samples can
lose different branch maps and attention heads.
"""

from __future__ import annotations

import numpy as np

from .config import TrainConfig
from .encoder import (BlockParams, HeadParams, ProjectionConfig, ProjectionParams, TokenSequence,
                      classify_head, encoder_block, init_block, init_head, init_projection,
                      project_to_sequence)
from .errors import UsageError
from .local_cnns import LANetBranch, local_cnns_forward, make_branches
from .regularizers import Mode
from .stem import StemCNN, StemConfig, stage_output_size
from .tensor import Tensor, as_tensor, layer_norm, parameter

LOCAL_SITE = "local"


def encoder_site(block_index: int) -> str:
    return f"encoder.block{block_index}"


class MadVit:
    """Classifier over (n, s, s, 3) images in [0, 1]."""

    def __init__(self, config: TrainConfig, rng):
        config.validate()
        self.config = config
        self.stem_config = StemConfig(
            input_size=config.input_size,
            stage_channels=config.stage_channels,
            blocks_per_stage=config.blocks_per_stage,
            output_stage=config.stage,
        )
        self.encoder_config = ProjectionConfig(
            embed_dim=config.d,
            heads=config.k,
            blocks=config.M,
            mlp_hidden=config.mlp_hidden,
            num_classes=config.num_classes,
        )
        side = stage_output_size(config.input_size, config.stage)
        channels = config.stage_channels[config.stage - 1]
        self.stem = StemCNN.create(self.stem_config, rng)
        self.branches: list[LANetBranch] = make_branches(channels, config.r, config.B, rng)
        self.projection: ProjectionParams = init_projection(
            channels, side * side, self.encoder_config, rng)
        self.blocks: list[BlockParams] = [
            init_block(self.encoder_config, rng) for _ in range(config.M)]
        # pre-norm blocks leave the residual stream unnormalized; without this
        # closing norm the class-token scale drifts and training destabilizes
        self.final_gain = parameter(np.ones(config.d))
        self.final_bias = parameter(np.zeros(config.d))
        self.head: HeadParams = init_head(self.encoder_config, rng)

    # -- inference / training ------------------------------------------------

    def forward(self, images, mode: Mode = Mode.INFERENCE, rng=None, collect=None) -> Tensor:
        """Logits for a batch; `collect` (a dict) gathers introspection data.

        After the call, collect holds "attention" (per block, (n, k, N, N)),
        "local_maps" (per branch, pre-drop, (n, h, w, 1)) and "decisions"
        (list of (site, [DropDecision, ...]) pairs).
        """
        cfg = self.config
        x = as_tensor(images)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if mode is Mode.TRAINING and rng is None and (cfg.p1 > 0.0 or cfg.p2 > 0.0):
            raise UsageError("training-mode forward with active drops needs an rng")
        if collect is not None:
            collect.setdefault("attention", [])
            collect.setdefault("local_maps", [])
            collect.setdefault("decisions", [])

        features = self.stem.forward(x)
        if self.branches:
            maps = [] if collect is not None else None
            features, decisions = local_cnns_forward(
                features, self.branches, cfg.p1, mode, rng,
                kind=cfg.regularizer_kind, block_size=cfg.dropblock_size, collect=maps)
            if collect is not None:
                collect["local_maps"] = maps
                collect["decisions"].append((LOCAL_SITE, list(decisions)))
        seq = project_to_sequence(features, self.projection)
        for i, block in enumerate(self.blocks, start=1):
            attn_sink = collect["attention"] if collect is not None else None
            seq, decisions = encoder_block(
                seq, block, cfg.p2, mode, rng,
                kind=cfg.regularizer_kind, block_size=cfg.dropblock_size, collect=attn_sink)
            if collect is not None:
                collect["decisions"].append((encoder_site(i), list(decisions)))
        seq = TokenSequence(tokens=layer_norm(seq.tokens, self.final_gain, self.final_bias))
        return classify_head(seq, self.head)

    def features_and_sequence(self, images, mode: Mode = Mode.INFERENCE, rng=None):
        """Stem features and the projected token sequence (inference plumbing)."""
        x = as_tensor(images)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        features = self.stem.forward(x)
        if self.branches:
            features, _ = local_cnns_forward(features, self.branches, 0.0, mode, rng)
        return features, project_to_sequence(features, self.projection)

    # -- parameter plumbing ----------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = list(self.stem.parameters())
        for i, branch in enumerate(self.branches, start=1):
            prefix = f"local.branch{i}"
            named.append((f"{prefix}.conv1", branch.conv1))
            named.append((f"{prefix}.conv1.bias", branch.conv1_bias))
            named.append((f"{prefix}.conv2", branch.conv2))
            named.append((f"{prefix}.conv2.bias", branch.conv2_bias))
        named.append(("project.conv", self.projection.conv))
        named.append(("project.conv.bias", self.projection.conv_bias))
        named.append(("encoder.cls", self.projection.cls))
        named.append(("encoder.pos", self.projection.pos))
        for i, block in enumerate(self.blocks, start=1):
            prefix = f"encoder.block{i}"
            named.extend([
                (f"{prefix}.wq", block.wq),
                (f"{prefix}.wk", block.wk),
                (f"{prefix}.wv", block.wv),
                (f"{prefix}.proj", block.proj),
                (f"{prefix}.proj.bias", block.proj_bias),
                (f"{prefix}.mlp1", block.mlp1),
                (f"{prefix}.mlp1.bias", block.mlp1_bias),
                (f"{prefix}.mlp2", block.mlp2),
                (f"{prefix}.mlp2.bias", block.mlp2_bias),
                (f"{prefix}.ln1.gain", block.ln1_gain),
                (f"{prefix}.ln1.bias", block.ln1_bias),
                (f"{prefix}.ln2.gain", block.ln2_gain),
                (f"{prefix}.ln2.bias", block.ln2_bias),
            ])
        named.append(("encoder.ln_final.gain", self.final_gain))
        named.append(("encoder.ln_final.bias", self.final_bias))
        named.append(("head.linear", self.head.weight))
        named.append(("head.linear.bias", self.head.bias))
        return named

    def param_tensors(self) -> list[Tensor]:
        return [t for _, t in self.parameters()]

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values from a name -> array mapping."""
        named = dict(self.parameters())
        missing = sorted(set(named) - set(state))
        extra = sorted(set(state) - set(named))
        if missing or extra:
            raise UsageError(f"parameter names do not match: missing {missing}, extra {extra}")
        for name, tensor in named.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise UsageError(f"{name}: stored shape {value.shape} != model shape {tensor.shape}")
            tensor.data[...] = value

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters()}
