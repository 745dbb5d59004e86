"""Long-context CTC speech recognition at desk scale.

Submodules: ``audio`` (WAV, manifests, log-mel), ``tokenizer`` (byte BPE),
``posenc`` (rotary and sinusoidal encodings), ``attention`` (naive, tiled and
sliding-window kernels), ``encoder`` (Conformer and checkpoints), ``ctc``,
``schedule`` and ``training``, ``decode`` (long-form schemes), ``evaluation``,
``toyset`` (synthetic corpora), ``bench`` and ``cli``.
"""

__version__ = "0.1.0"
