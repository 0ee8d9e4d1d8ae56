"""Answer generation with a four-way word-source selector over question,
passage, vocabulary and knowledge triples, trained with a relaxed
variational objective on a small reverse-mode autodiff engine."""

__version__ = "0.1.0"
