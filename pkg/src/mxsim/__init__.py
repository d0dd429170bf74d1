"""Bit-accurate emulation of precision-scalable MX multiply-accumulate datapaths."""
from .blocks import MxBlock, MxMatrix, decode_block, quantize_matrix, quantize_to_mx, dequantize_matrix
from .formats import FORMATS, FormatName, FormatSpec, decode_element, encode_element, get_format
from .mac import MacState, PrecisionMode, mac_cycle, mac_dot_block, mac_gemm, new_state, quantize_group
from .oracle import gemm_fp64
from .tree import AccumulatorValue, ProductTerm, TreeConfig, Variant, cost_report, tree_reduce

__version__ = "0.1.0"
