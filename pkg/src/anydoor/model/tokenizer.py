"""Byte-level tokenizer: ids 0-255 are raw bytes, then BOS, EOS, PAD."""

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259


def _as_bytes(text) -> bytes:
    if isinstance(text, str):
        return text.encode("utf-8")
    return bytes(text)


def tokenize(text) -> list[int]:
    return list(_as_bytes(text))


def detokenize(ids) -> bytes:
    """Inverse of :func:`tokenize`; special ids are dropped."""
    return bytes(int(i) for i in ids if 0 <= int(i) < 256)
