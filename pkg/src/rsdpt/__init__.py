"""Domain post-training and fine-tuning of a small transformer encoder for
multi-turn response selection."""

from .corpus import Dialog, EvalInstance, FineTuneExample, import_ubuntu_tsv, load_dialogs, load_eval, load_finetune
from .encoder import Encoder, EncoderConfig, load_checkpoint, save_checkpoint
from .evaluation import Metrics, RankingRecord, evaluate, mean_reciprocal_rank, rank_of_truth, recall_at_k
from .pretrain_gen import PretrainExample, generate_pretrain_set
from .tokenizer import Tokenizer, Vocab, build_model_input, build_vocab, tokenize
from .trainer import TrainConfig, fine_tune, post_train, resample_negatives, select_trainable

__version__ = "0.1.0"
