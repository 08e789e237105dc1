"""Export fused backbone embeddings from image folders into the fairproto
manifest format. All pretrained-model dependencies live here; the consumer
package reads only the emitted files."""

from .extract import ExtractorConfig, extract
from .preprocess import IMAGENET_MEAN, IMAGENET_STD, build_transform, preprocess

__version__ = "0.1.0"
