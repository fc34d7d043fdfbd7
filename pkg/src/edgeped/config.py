"""Declarative network description: backbone schedule, neck topology, heads.

A model config is a plain-text file with a key/value header followed by
ordered layer sections. One layer per line, columns are
``kind channels kernel stride [expansion] [marker]``:

    input_size 416
    classes 1
    anchors32 81x82 135x169 344x319
    anchors16 10x14 23x27 37x58

    backbone:
    conv 32 3 2
    block 16 3 1 1
    block 96 3 1 6 tap16
    ...
    block 320 3 1 6 tap32

    neck32:
    conv 256 1 1 branch
    conv 512 3 1

    neck16:
    conv 128 1 1
    upsample
    concat tap16
    conv 256 3 1

Kinds: ``conv`` (plain convolution), ``block`` (inverted residual, backbone
only), ``upsample`` / ``concat`` (neck16 only). Markers: ``tap16`` / ``tap32``
flag the backbone layers whose outputs feed the two detection branches;
``branch`` flags the neck32 layer whose output also feeds neck16 (defaults
to the first neck32 layer). Each neck ends in an implicit 1x1 detection
conv producing ``anchors * (5 + classes)`` channels.

Input channels are never written; they are inferred by chaining the layers,
and the whole graph is validated before any compute.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class ConfigParseError(ValueError):
    """Malformed config text; carries the 1-based offending line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class GraphValidationError(ValueError):
    """The parsed graph is structurally inconsistent (channels, strides, taps)."""


RGB_CHANNELS = 3


@dataclass(frozen=True)
class ConvSpec:
    """Plain convolution layer: ``out_ch`` filters of size kernel x kernel."""

    out_ch: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class InvertedResidualSpec:
    """Inverted residual block: expand by ``expansion``, depthwise, project.

    The expansion pointwise conv is present even when ``expansion == 1`` so
    that every block has exactly three constituent convolutions. The identity
    shortcut exists iff stride is 1 and input channels equal output channels.
    """

    c_in: int
    c_out: int
    expansion: int
    stride: int = 1
    kernel: int = 3

    def __post_init__(self):
        if self.expansion < 1:
            raise GraphValidationError(f"expansion must be >= 1, got {self.expansion}")
        if self.stride not in (1, 2):
            raise GraphValidationError(f"block stride must be 1 or 2, got {self.stride}")

    @property
    def expanded(self) -> int:
        return self.c_in * self.expansion

    @property
    def has_shortcut(self) -> bool:
        return self.stride == 1 and self.c_in == self.c_out


@dataclass(frozen=True)
class NeckOp:
    """One neck operation: a conv, a nearest-neighbor 2x upsample, or a
    channel concat with the stride-16 backbone tap."""

    kind: str  # "conv" | "upsample" | "concat"
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    concat_source: str = ""


@dataclass(frozen=True)
class HeadSpec:
    """Detection head at one stride: per-anchor box/objectness/class channels."""

    stride: int
    anchors: tuple[tuple[float, float], ...]
    class_count: int = 1

    @property
    def out_channels(self) -> int:
        return len(self.anchors) * (5 + self.class_count)


@dataclass(frozen=True)
class ModelConfig:
    name: str
    input_size: int
    class_count: int
    stem: ConvSpec
    blocks: tuple[InvertedResidualSpec, ...]
    tap16_index: int
    tap32_index: int
    neck32: tuple[NeckOp, ...]
    neck16: tuple[NeckOp, ...]
    branch_index: int
    head32: HeadSpec = field(init=False)
    head16: HeadSpec = field(init=False)
    anchors32: tuple[tuple[float, float], ...] = ()
    anchors16: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(
            self, "head32", HeadSpec(32, self.anchors32, self.class_count)
        )
        object.__setattr__(
            self, "head16", HeadSpec(16, self.anchors16, self.class_count)
        )

    @property
    def heads(self) -> tuple[HeadSpec, HeadSpec]:
        return (self.head32, self.head16)

    def validate(self) -> None:
        """Check stride accounting, channel chaining, and tap placement.

        Raises GraphValidationError before any compute happens on a bad graph.
        """
        if self.input_size < 32 or self.input_size % 32:
            raise GraphValidationError(
                f"input_size must be a positive multiple of 32, got {self.input_size}"
            )
        if self.class_count < 1:
            raise GraphValidationError(f"classes must be >= 1, got {self.class_count}")
        if not self.anchors32 or not self.anchors16:
            raise GraphValidationError("both heads need at least one anchor")
        if not self.blocks:
            raise GraphValidationError("backbone needs at least one block")

        # Backbone: chain channels, track cumulative stride, check taps.
        stride = self.stem.stride
        channels = self.stem.out_ch
        tap_strides = {}
        for i, blk in enumerate(self.blocks):
            if blk.c_in != channels:
                raise GraphValidationError(
                    f"backbone block {i} expects {blk.c_in} input channels, "
                    f"previous layer produces {channels}"
                )
            channels = blk.c_out
            stride *= blk.stride
            if i == self.tap16_index:
                tap_strides[16] = stride
            if i == self.tap32_index:
                tap_strides[32] = stride
        for want in (16, 32):
            idx = self.tap16_index if want == 16 else self.tap32_index
            if idx < 0 or idx >= len(self.blocks):
                raise GraphValidationError(f"tap{want} marker missing from backbone")
            if tap_strides.get(want) != want:
                raise GraphValidationError(
                    f"tap{want} layer has cumulative stride {tap_strides.get(want)}, "
                    f"expected {want}"
                )
        if self.tap32_index != len(self.blocks) - 1:
            raise GraphValidationError("tap32 must be the last backbone block")
        if self.tap16_index >= self.tap32_index:
            raise GraphValidationError("tap16 must come before tap32")
        tap16_channels = self.blocks[self.tap16_index].c_out

        # Neck32: convs only, branch point must exist.
        if not self.neck32:
            raise GraphValidationError("neck32 needs at least one conv")
        if not 0 <= self.branch_index < len(self.neck32):
            raise GraphValidationError(
                f"branch index {self.branch_index} out of range for neck32"
            )
        channels = self.blocks[self.tap32_index].c_out
        stride = 32
        branch_channels = 0
        for j, op in enumerate(self.neck32):
            if op.kind != "conv":
                raise GraphValidationError(f"neck32 op {j} must be conv, got {op.kind}")
            channels = op.out_ch
            stride *= op.stride
            if j == self.branch_index:
                branch_channels = channels
        if stride != 32:
            raise GraphValidationError(f"neck32 ends at stride {stride}, expected 32")

        # Neck16: starts from the branch point, must land at stride 16.
        channels = branch_channels
        stride = 32
        for j, op in enumerate(self.neck16):
            if op.kind == "conv":
                channels = op.out_ch
                stride *= op.stride
            elif op.kind == "upsample":
                if stride % 2:
                    raise GraphValidationError(f"neck16 op {j}: cannot upsample stride {stride}")
                stride //= 2
            elif op.kind == "concat":
                if op.concat_source != "tap16":
                    raise GraphValidationError(
                        f"neck16 op {j}: unknown concat source {op.concat_source!r}"
                    )
                if stride != 16:
                    raise GraphValidationError(
                        f"neck16 op {j}: concat with tap16 requires stride 16, at {stride}"
                    )
                channels += tap16_channels
            else:
                raise GraphValidationError(f"neck16 op {j}: unknown kind {op.kind}")
        if stride != 16:
            raise GraphValidationError(f"neck16 ends at stride {stride}, expected 16")


def _parse_anchors(value: str, line_no: int) -> tuple[tuple[float, float], ...]:
    anchors = []
    for token in value.split():
        parts = token.split("x")
        if len(parts) != 2:
            raise ConfigParseError(line_no, f"anchor {token!r} is not WIDTHxHEIGHT")
        try:
            anchors.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ConfigParseError(line_no, f"anchor {token!r} has non-numeric dims") from None
    if not anchors:
        raise ConfigParseError(line_no, "anchor list is empty")
    return tuple(anchors)


def _int_field(token: str, what: str, line_no: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise ConfigParseError(line_no, f"{what} {token!r} is not an integer") from None


_SECTIONS = ("backbone", "neck32", "neck16")
_HEADER_KEYS = ("input_size", "classes", "anchors32", "anchors16")


def parse_model_config(text: str, name: str = "<config>") -> ModelConfig:
    """Parse config text into a validated ModelConfig.

    Unknown kinds, markers, sections, and header keys are rejected with the
    offending line number.
    """
    header: dict[str, object] = {}
    sections: dict[str, list[tuple[int, list[str]]]] = {s: [] for s in _SECTIONS}
    seen_sections: set[str] = set()
    current: str | None = None

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.endswith(":"):
            section = line[:-1].strip()
            if section not in _SECTIONS:
                raise ConfigParseError(line_no, f"unknown section {section!r}")
            if section in seen_sections:
                raise ConfigParseError(line_no, f"duplicate section {section!r}")
            seen_sections.add(section)
            current = section
            continue
        tokens = line.split()
        if current is None:
            key = tokens[0]
            if key not in _HEADER_KEYS:
                raise ConfigParseError(line_no, f"unknown header key {key!r}")
            if key in header:
                raise ConfigParseError(line_no, f"duplicate header key {key!r}")
            value = line[len(key):].strip()
            if key in ("input_size", "classes"):
                header[key] = _int_field(value, key, line_no)
            else:
                header[key] = _parse_anchors(value, line_no)
        else:
            sections[current].append((line_no, tokens))

    for key in ("input_size", "classes"):
        if key not in header:
            raise ConfigParseError(1, f"missing header key {key!r}")
    for key in ("anchors32", "anchors16"):
        if key not in header:
            raise ConfigParseError(1, f"missing header key {key!r}")
    if "backbone" not in seen_sections or not sections["backbone"]:
        raise ConfigParseError(1, "missing or empty backbone: section")

    # Backbone: first line must be the stem conv, rest are blocks or convs.
    stem: ConvSpec | None = None
    blocks: list[InvertedResidualSpec] = []
    tap16 = tap32 = -1
    channels = RGB_CHANNELS
    for pos, (line_no, tokens) in enumerate(sections["backbone"]):
        kind = tokens[0]
        marker = None
        if tokens[-1] in ("tap16", "tap32"):
            marker = tokens[-1]
            tokens = tokens[:-1]
        if kind == "conv":
            if len(tokens) != 4:
                raise ConfigParseError(line_no, "conv needs: conv CHANNELS KERNEL STRIDE")
            if pos != 0:
                raise ConfigParseError(line_no, "only the first backbone layer may be a conv stem")
            out_ch = _int_field(tokens[1], "channels", line_no)
            kernel = _int_field(tokens[2], "kernel", line_no)
            stride = _int_field(tokens[3], "stride", line_no)
            stem = ConvSpec(out_ch, kernel, stride)
            channels = out_ch
        elif kind == "block":
            if len(tokens) != 5:
                raise ConfigParseError(
                    line_no, "block needs: block CHANNELS KERNEL STRIDE EXPANSION"
                )
            if stem is None:
                raise ConfigParseError(line_no, "backbone must start with a conv stem")
            out_ch = _int_field(tokens[1], "channels", line_no)
            kernel = _int_field(tokens[2], "kernel", line_no)
            stride = _int_field(tokens[3], "stride", line_no)
            expansion = _int_field(tokens[4], "expansion", line_no)
            try:
                blocks.append(
                    InvertedResidualSpec(channels, out_ch, expansion, stride, kernel)
                )
            except GraphValidationError as exc:
                raise ConfigParseError(line_no, str(exc)) from None
            channels = out_ch
            if marker == "tap16":
                tap16 = len(blocks) - 1
                marker = None
            elif marker == "tap32":
                tap32 = len(blocks) - 1
                marker = None
        else:
            raise ConfigParseError(line_no, f"unknown layer kind {kind!r}")
        if marker is not None:
            raise ConfigParseError(line_no, f"marker {marker!r} not allowed on this layer")
    if stem is None:
        raise ConfigParseError(1, "backbone must start with a conv stem")

    # Necks.
    def parse_neck(section: str, allow: tuple[str, ...]) -> tuple[list[NeckOp], int]:
        ops: list[NeckOp] = []
        branch = -1
        for line_no, tokens in sections[section]:
            kind = tokens[0]
            if kind not in allow:
                raise ConfigParseError(
                    line_no, f"kind {kind!r} not allowed in {section}"
                )
            if kind == "conv":
                marked = False
                if tokens[-1] == "branch":
                    if section != "neck32":
                        raise ConfigParseError(line_no, "branch marker only valid in neck32")
                    marked = True
                    tokens = tokens[:-1]
                if len(tokens) != 4:
                    raise ConfigParseError(line_no, "conv needs: conv CHANNELS KERNEL STRIDE")
                ops.append(
                    NeckOp(
                        "conv",
                        out_ch=_int_field(tokens[1], "channels", line_no),
                        kernel=_int_field(tokens[2], "kernel", line_no),
                        stride=_int_field(tokens[3], "stride", line_no),
                    )
                )
                if marked:
                    branch = len(ops) - 1
            elif kind == "upsample":
                if len(tokens) != 1:
                    raise ConfigParseError(line_no, "upsample takes no arguments")
                ops.append(NeckOp("upsample"))
            elif kind == "concat":
                if len(tokens) != 2:
                    raise ConfigParseError(line_no, "concat needs a source (tap16)")
                ops.append(NeckOp("concat", concat_source=tokens[1]))
        return ops, branch

    neck32, branch = parse_neck("neck32", ("conv",))
    neck16, _ = parse_neck("neck16", ("conv", "upsample", "concat"))
    if branch < 0:
        branch = 0

    config = ModelConfig(
        name=name,
        input_size=header["input_size"],  # type: ignore[arg-type]
        class_count=header["classes"],  # type: ignore[arg-type]
        stem=stem,
        blocks=tuple(blocks),
        tap16_index=tap16,
        tap32_index=tap32,
        neck32=tuple(neck32),
        neck16=tuple(neck16),
        branch_index=branch,
        anchors32=header["anchors32"],  # type: ignore[arg-type]
        anchors16=header["anchors16"],  # type: ignore[arg-type]
    )
    config.validate()
    return config


def load_model_config(path: str) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model_config(fh.read(), name=path)


# Reference network: MobileNetV2 bottleneck schedule truncated after the
# stride-32 stage, taps at the last stride-16 and stride-32 layers, and a
# two-branch neck (1x1 lateral -> 3x3 tower per scale, with a 2x upsample
# and a tap16 concat feeding the stride-16 branch).
REFERENCE_CONFIG_TEXT = """\
# edgeped reference model
input_size 416
classes 1
anchors32 81x82 135x169 344x319
anchors16 10x14 23x27 37x58

backbone:
conv 32 3 2
block 16 3 1 1
block 24 3 2 6
block 24 3 1 6
block 32 3 2 6
block 32 3 1 6
block 32 3 1 6
block 64 3 2 6
block 64 3 1 6
block 64 3 1 6
block 64 3 1 6
block 96 3 1 6
block 96 3 1 6
block 96 3 1 6 tap16
block 160 3 2 6
block 160 3 1 6
block 160 3 1 6
block 320 3 1 6 tap32

neck32:
conv 256 1 1 branch
conv 512 3 1

neck16:
conv 128 1 1
upsample
concat tap16
conv 256 3 1
"""

# Small sibling of the reference config for fast smoke runs and demos.
MINI_CONFIG_TEXT = """\
# edgeped mini model (fast CPU smoke runs)
input_size 160
classes 1
anchors32 81x82 135x169 344x319
anchors16 10x14 23x27 37x58

backbone:
conv 8 3 2
block 8 3 1 1
block 16 3 2 6
block 16 3 1 6
block 24 3 2 6
block 32 3 2 6
block 32 3 1 6 tap16
block 48 3 2 6
block 48 3 1 6 tap32

neck32:
conv 32 1 1 branch
conv 64 3 1

neck16:
conv 16 1 1
upsample
concat tap16
conv 32 3 1
"""


def reference_config() -> ModelConfig:
    return parse_model_config(REFERENCE_CONFIG_TEXT, name="reference")


def mini_config() -> ModelConfig:
    return parse_model_config(MINI_CONFIG_TEXT, name="mini")
