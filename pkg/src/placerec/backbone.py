"""ViT encoder, siamese decoder and task heads.

The encoder is a standard ViT with a class token, register tokens and a
learned mask token. The decoder alternates self-attention over the first
image's token stream with cross-attention against the second image's
tokens, and feeds three heads: per-patch pixel reconstruction, a global
descriptor projection, and a pair-similarity MLP.
"""

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised when a BackboneConfig violates its invariants."""


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 224
    patch_size: int = 14
    encoder_dim: int = 768
    encoder_depth: int = 12
    encoder_heads: int = 12
    decoder_dim: int = 768
    decoder_depth: int = 12
    decoder_heads: int = 12
    num_register_tokens: int = 4
    global_dim: int = 512
    mask_ratio: float = 0.90

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.encoder_dim % self.encoder_heads != 0:
            raise ConfigError("encoder_dim must be divisible by encoder_heads")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ConfigError("decoder_dim must be divisible by decoder_heads")
        if self.decoder_depth % 2 != 0:
            raise ConfigError("decoder_depth must be even (self/cross alternation)")
        if not (0.0 <= self.mask_ratio < 1.0):
            raise ConfigError("mask_ratio must be in [0, 1)")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def n_special(self) -> int:
        return 1 + self.num_register_tokens


def tiny_config(image_size: int = 64) -> BackboneConfig:
    """Desk-scale preset: runs every stage on CPU in seconds."""
    return BackboneConfig(
        image_size=image_size, patch_size=8,
        encoder_dim=128, encoder_depth=4, encoder_heads=4,
        decoder_dim=128, decoder_depth=4, decoder_heads=4,
        num_register_tokens=4, global_dim=512, mask_ratio=0.90,
    )


def vit_b_config(image_size: int = 322) -> BackboneConfig:
    """Full-fidelity preset: ViT-B encoder with a same-sized decoder."""
    return BackboneConfig(
        image_size=image_size, patch_size=14,
        encoder_dim=768, encoder_depth=12, encoder_heads=12,
        decoder_dim=768, decoder_depth=12, decoder_heads=12,
        num_register_tokens=4, global_dim=512, mask_ratio=0.90,
    )


PRESETS = {"tiny": tiny_config, "vitb": vit_b_config}


@dataclass
class TokenGrid:
    """A batch of token sequences plus the patch-grid metadata behind them."""
    tokens: torch.Tensor  # (B, S, D)
    grid_h: int
    grid_w: int
    n_special: int
    provenance: str  # "encoder_dense" | "decoder"


@dataclass
class MaskPlan:
    """Per-sample sorted patch indices to replace with the mask token."""
    masked_indices: torch.Tensor  # (B, n_masked) long, sorted per row
    mask_ratio: float

    @classmethod
    def random(cls, batch: int, num_patches: int, mask_ratio: float,
               generator: torch.Generator | None = None) -> "MaskPlan":
        n_masked = int(round(mask_ratio * num_patches))
        rows = []
        for _ in range(batch):
            perm = torch.randperm(num_patches, generator=generator)
            rows.append(perm[:n_masked].sort().values)
        return cls(masked_indices=torch.stack(rows), mask_ratio=mask_ratio)

    @property
    def n_masked(self) -> int:
        return self.masked_indices.shape[1]


def sincos_pos_embed(dim: int, grid_h: int, grid_w: int,
                     dtype=torch.float32) -> torch.Tensor:
    """Fixed 2D sine-cosine positional embedding, (grid_h*grid_w, dim)."""
    if dim % 4 != 0:
        raise ConfigError("embedding dim must be divisible by 4 for 2D sin-cos")
    half = dim // 2

    def _1d(positions: torch.Tensor) -> torch.Tensor:
        omega = torch.arange(half // 2, dtype=torch.float64) / (half / 2.0)
        omega = 1.0 / (10000 ** omega)
        out = positions[:, None].double() * omega[None, :]
        return torch.cat([torch.sin(out), torch.cos(out)], dim=1)

    ys, xs = torch.meshgrid(
        torch.arange(grid_h), torch.arange(grid_w), indexing="ij")
    emb = torch.cat([_1d(ys.reshape(-1)), _1d(xs.reshape(-1))], dim=1)
    return emb.to(dtype)


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B,3,H,W) -> (B, num_patches, 3*p*p), row-major patches, channels first."""
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError("image size not divisible by patch size")
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 1, 3, 5)  # B, gh, gw, C, p, p
    return x.reshape(b, (h // p) * (w // p), c * p * p)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, s, d = x.shape
        qkv = self.qkv(x).reshape(b, s, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        out = attn.softmax(dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, s, d)
        return self.proj(out)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context):
        b, s, d = x.shape
        sc = context.shape[1]
        q = self.q(x).reshape(b, s, self.num_heads, self.head_dim).transpose(1, 2)
        kv = self.kv(context).reshape(b, sc, 2, self.num_heads, self.head_dim)
        k, v = kv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        out = attn.softmax(dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, s, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden_ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * hidden_ratio)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim * hidden_ratio, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class DecoderCrossBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x, context):
        x = x + self.attn(self.norm_q(x), self.norm_kv(context))
        x = x + self.mlp(self.norm2(x))
        return x


class PairBackbone(nn.Module):
    """Shared encoder + asymmetric decoder + the three task heads."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d_enc, d_dec = cfg.encoder_dim, cfg.decoder_dim

        self.patch_proj = nn.Conv2d(3, d_enc, cfg.patch_size, cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d_enc))
        self.register_tokens = nn.Parameter(
            torch.zeros(1, cfg.num_register_tokens, d_enc))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d_enc))
        self.encoder_blocks = nn.ModuleList(
            EncoderBlock(d_enc, cfg.encoder_heads) for _ in range(cfg.encoder_depth))
        self.encoder_norm = nn.LayerNorm(d_enc)

        self.decoder_embed = nn.Linear(d_enc, d_dec)
        self.decoder_cls_token = nn.Parameter(torch.zeros(1, 1, d_dec))
        blocks = []
        for i in range(cfg.decoder_depth):
            if i % 2 == 0:
                blocks.append(EncoderBlock(d_dec, cfg.decoder_heads))
            else:
                blocks.append(DecoderCrossBlock(d_dec, cfg.decoder_heads))
        self.decoder_blocks = nn.ModuleList(blocks)
        self.decoder_norm = nn.LayerNorm(d_dec)

        self.pixel_head = nn.Linear(d_dec, 3 * cfg.patch_size ** 2)
        # Zero bias keeps the descriptor direction scale-equivariant.
        self.global_head = nn.Linear(d_enc, cfg.global_dim, bias=False)
        self.pair_head = nn.Sequential(
            nn.Linear(d_dec, d_dec), nn.GELU(), nn.Linear(d_dec, 1))

        for tok in (self.cls_token, self.register_tokens, self.mask_token):
            nn.init.trunc_normal_(tok, std=0.02)
        # The decoder class token receives no gradient during masked
        # pre-training (pixel reconstruction runs without it), so it enters
        # fine-tuning at its initial value. A near-zero init leaves the
        # classification readout insensitive to its inputs and BCE stalls at
        # ln 2 on balanced batches; a unit-scale init keeps the readout live.
        nn.init.trunc_normal_(self.decoder_cls_token, std=1.0)
        self._pos_cache: dict = {}

    def _pos_embed(self, grid_h: int, grid_w: int, like: torch.Tensor) -> torch.Tensor:
        key = (grid_h, grid_w, like.dtype, like.device)
        if key not in self._pos_cache:
            emb = sincos_pos_embed(self.cfg.encoder_dim, grid_h, grid_w,
                                   dtype=like.dtype).to(like.device)
            self._pos_cache[key] = emb
        return self._pos_cache[key]

    # --- encoder -----------------------------------------------------------

    def patch_embed(self, images: torch.Tensor,
                    mask_plan: MaskPlan | None = None) -> TokenGrid:
        """Tokenize a batch of square images; specials prepended, pos added.

        Masked patch positions are replaced by the learned mask token before
        the positional embedding is added, so masked content never reaches
        the transformer.
        """
        b, c, h, w = images.shape
        if h != w or h != self.cfg.image_size:
            raise ConfigError(
                f"expected {self.cfg.image_size}px square input, got {h}x{w}")
        grid = h // self.cfg.patch_size
        x = self.patch_proj(images).flatten(2).transpose(1, 2)  # (B, N, D)
        if mask_plan is not None:
            if int(mask_plan.masked_indices.max()) >= x.shape[1]:
                raise ValueError("mask indices exceed patch grid")
            idx = mask_plan.masked_indices.to(x.device)
            rows = torch.arange(b, device=x.device)[:, None]
            x[rows, idx] = self.mask_token.to(x.dtype)
        x = x + self._pos_embed(grid, grid, x)[None]
        specials = torch.cat(
            [self.cls_token, self.register_tokens], dim=1).expand(b, -1, -1)
        tokens = torch.cat([specials.to(x.dtype), x], dim=1)
        return TokenGrid(tokens=tokens, grid_h=grid, grid_w=grid,
                         n_special=self.cfg.n_special, provenance="encoder_dense")

    def encode(self, images: torch.Tensor,
               mask_plan: MaskPlan | None = None
               ) -> tuple[TokenGrid, torch.Tensor]:
        """Run the encoder; returns (dense patch tokens, class token).

        Class and register tokens are stripped from the dense output, which
        is what the decoder consumes.
        """
        grid = self.patch_embed(images, mask_plan)
        x = grid.tokens
        for blk in self.encoder_blocks:
            x = blk(x)
        x = self.encoder_norm(x)
        cls = x[:, 0]
        dense = TokenGrid(tokens=x[:, grid.n_special:], grid_h=grid.grid_h,
                          grid_w=grid.grid_w, n_special=0,
                          provenance="encoder_dense")
        return dense, cls

    # --- decoder -----------------------------------------------------------

    def decode(self, tokens_a: TokenGrid, tokens_b: TokenGrid,
               with_class_token: bool = False) -> TokenGrid:
        """Alternate self-attention on the a-stream with cross-attention to b.

        Asymmetric by construction: only the a-stream is updated. No final
        norm here; the heads normalize.
        """
        if (tokens_a.grid_h, tokens_a.grid_w) != (tokens_b.grid_h, tokens_b.grid_w):
            raise ValueError("decoder inputs must share a patch grid")
        if tokens_a.n_special != 0 or tokens_b.n_special != 0:
            raise ValueError("decoder expects dense tokens with specials stripped")
        x = self.decoder_embed(tokens_a.tokens)
        y = self.decoder_embed(tokens_b.tokens)
        n_special = 0
        if with_class_token:
            cls = self.decoder_cls_token.expand(x.shape[0], -1, -1).to(x.dtype)
            x = torch.cat([cls, x], dim=1)
            n_special = 1
        for blk in self.decoder_blocks:
            if isinstance(blk, DecoderCrossBlock):
                x = blk(x, y)
            else:
                x = blk(x)
        return TokenGrid(tokens=x, grid_h=tokens_a.grid_h, grid_w=tokens_a.grid_w,
                         n_special=n_special, provenance="decoder")

    # --- heads -------------------------------------------------------------

    def reconstruct_pixels(self, decoded: TokenGrid) -> torch.Tensor:
        """Per-patch pixel vectors, (B, num_patches, 3*p*p)."""
        if decoded.n_special != 0:
            raise ValueError("reconstruction expects a decode without class token")
        return self.pixel_head(self.decoder_norm(decoded.tokens))

    def project_global(self, class_token: torch.Tensor) -> torch.Tensor:
        """Project the encoder class token to a unit-norm global descriptor."""
        v = self.global_head(class_token)
        norm = v.norm(dim=-1, keepdim=True)
        if bool((norm < 1e-12).any()):
            logger.warning("degenerate global descriptor: zero-norm projection")
        return v / norm.clamp_min(1e-12)

    def pair_score(self, dense_a: TokenGrid, dense_b: TokenGrid) -> torch.Tensor:
        """Pre-sigmoid same-place score for ordered pairs, (B,)."""
        out = self.decode(dense_a, dense_b, with_class_token=True)
        cls = self.decoder_norm(out.tokens[:, 0])
        return self.pair_head(cls).squeeze(-1)

    # --- convenience -------------------------------------------------------

    def forward_descriptor(self, images: torch.Tensor) -> torch.Tensor:
        _, cls = self.encode(images)
        return self.project_global(cls)

    def load_external_encoder(self, state_dict: dict) -> tuple[list, list]:
        """Copy matching encoder tensors from a third-party checkpoint.

        Name + shape matched; anything else keeps its random init. Returns
        (loaded, skipped) name lists.
        """
        own = self.state_dict()
        loaded, skipped = [], []
        for name, tensor in state_dict.items():
            if name in own and own[name].shape == tensor.shape:
                own[name].copy_(tensor)
                loaded.append(name)
            else:
                skipped.append(name)
        self.load_state_dict(own)
        return loaded, skipped
