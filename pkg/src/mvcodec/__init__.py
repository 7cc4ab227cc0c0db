"""Model-based video codec.

A video scene is stored as the quantized weights of an implicit neural
representation plus one tiny embedding per frame; decoding any frame is a
single forward pass, independent of decode order.
"""

from .bitstream import Bitstream, parse_bitstream, serialize_bitstream
from .codec import (Decoder, EncodeResult, bpp_of_bitstream, build_bitstream,
                    compute_bpp, decode_from_file, encode, encode_to_file,
                    float_decode)
from .config import (LossWeights, ModelConfig, TrainConfig, make_config,
                     preset_names)
from .errors import (BadMagicError, BitstreamError, ChecksumError, ConfigError,
                     EncodingDivergedError, MVCodecError, OracleUnavailableError,
                     TruncatedStreamError, VersionError)
from .metrics import RDCurve, RDPoint, bd_rate, emit_rd_report, ms_ssim, psnr
from .model import FrameOutputs, SceneModel, make_coordinate_grid, positional_encoding
from .oracles import (EmbeddingBuffer, compute_flow_targets,
                      make_embedding_oracle, make_flow_oracle)
from .quantize import (QuantizedModel, QuantizedTensor, dequantize_tensor,
                       pack_codes, quantize_embeddings, quantize_state,
                       quantize_tensor, unpack_codes)
from .video_io import VideoSequence, load_frames, synth_video, write_png_dir

__version__ = "0.1.0"
