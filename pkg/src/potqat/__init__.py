"""Power-of-two weight quantization with quantization-aware training for a char-level LM."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import CharVocab, Corpus, load_corpus, sample_batch
from .model import ModelConfig, forward_logits, generate, model_init
from .qat import (PreparedModel, QatConfig, calibrate_ptq, convert, evaluate, export_pot4,
                  perplexity, prepare, qat_run, train_step)
from .quant import (Observer, PackedPotTensor, QuantSpec, affine_dequantize, affine_quantize,
                    compute_scale_affine, compute_scale_pot, fake_quant, pack_codes, pot_dequantize,
                    pot_quantize, unpack_codes)
from .shift import bench_matmul, model_size_bytes, shift_matmul
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
