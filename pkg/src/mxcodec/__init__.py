"""Software MXFP4 codec: BF16 -> MXFP4 quantization, direct FP4 -> FP8
conversion, ragged expert tensors and an expert-dispatch payload simulator."""

from .bitcodec import (
    DEFAULT_PARAMS,
    FormatParams,
    decode_fp4,
    decode_fp8,
    decode_ue8m0,
    encode_fp4,
    pack_nibbles,
    unpack_nibbles,
)
from .converter import (
    FP8BlockTensor,
    ScaleGroup,
    align_scales,
    convert_code,
    fp4_row_to_fp8_col,
    fp4_row_to_fp8_row,
    pad_cols,
    pad_rows,
)
from .dispatch_sim import RoutingAssignment, WirePacket, payload_bytes, simulate_a2a
from .errors import QuantizationError, ShapeError, WireFormatError
from .quantizer import (
    MXFP4RowTensor,
    compute_block_scale,
    dequantize_to_real,
    quantize_row_tensor,
    quantize_value,
)
from .ragged import RaggedFP4Tensor, build_ragged, split_convert_to_fp8_col, split_view

__version__ = "0.1.0"
