"""Generator families: attention+copy Seq2Seq, CVAE, and the causal-LM path."""
from .lm import LMGenerator, LMSerialization, TinyCausalLM, serialize_for_lm
from .recurrent import CVAEGenerator, RecurrentSession, Seq2SeqGenerator, TokenVocab

__all__ = ["LMGenerator", "LMSerialization", "TinyCausalLM", "serialize_for_lm", "CVAEGenerator",
           "RecurrentSession", "Seq2SeqGenerator", "TokenVocab"]
