"""Cipher registry for SPA packets.

Each cipher turns (key, plaintext, rng) into a self-contained ciphertext field
with its IV or AEAD nonce prefixed. Integrity of the whole packet comes from
the outer HMAC, so the CBC modes need nothing beyond PKCS#7.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM, ChaCha20Poly1305
from pyserpent import Serpent

try:
    # twofish 0.3.0 loads its C core through the ``imp`` module, gone in Python 3.12
    from twofish import Twofish
except ImportError:
    Twofish = None

NULL_CIPHER = 0
AES_256_CBC = 1
AES_256_GCM = 2
CHACHA20_POLY1305 = 3
TWOFISH_256_CBC = 4
SERPENT_256_CBC = 5

BLOCK = 16


class CipherUnavailable(LookupError):
    pass


class CipherError(ValueError):
    """Ciphertext could not be opened (bad padding, bad tag, bad length)."""


@dataclass(frozen=True)
class CipherSpec:
    id: int
    name: str
    seal: Callable[[bytes, bytes, object], bytes]
    open: Callable[[bytes, bytes], bytes]


def _pad(data: bytes) -> bytes:
    p = padding.PKCS7(BLOCK * 8).padder()
    return p.update(data) + p.finalize()


def _unpad(data: bytes) -> bytes:
    u = padding.PKCS7(BLOCK * 8).unpadder()
    try:
        return u.update(data) + u.finalize()
    except ValueError as exc:
        raise CipherError("bad padding") from exc


def _cbc_encrypt(block_encrypt, iv: bytes, data: bytes) -> bytes:
    out = bytearray()
    prev = iv
    for i in range(0, len(data), BLOCK):
        x = bytes(a ^ b for a, b in zip(data[i:i + BLOCK], prev))
        prev = block_encrypt(x)
        out += prev
    return bytes(out)


def _cbc_decrypt(block_decrypt, iv: bytes, data: bytes) -> bytes:
    out = bytearray()
    prev = iv
    for i in range(0, len(data), BLOCK):
        blk = data[i:i + BLOCK]
        out += bytes(a ^ b for a, b in zip(block_decrypt(blk), prev))
        prev = blk
    return bytes(out)


def _split_iv(field: bytes, iv_len: int, need_blocks: bool) -> tuple[bytes, bytes]:
    if len(field) < iv_len + (BLOCK if need_blocks else 16):
        raise CipherError("ciphertext too short")
    iv, body = field[:iv_len], field[iv_len:]
    if need_blocks and len(body) % BLOCK:
        raise CipherError("ciphertext not block aligned")
    return iv, body


# -- null ---------------------------------------------------------------------

def _null_seal(key, pt, rng):
    return pt


def _null_open(key, ct):
    return ct


# -- AES ----------------------------------------------------------------------

def _aes_cbc_seal(key, pt, rng):
    iv = rng.bytes(BLOCK)
    enc = Cipher(algorithms.AES(key), modes.CBC(iv)).encryptor()
    return iv + enc.update(_pad(pt)) + enc.finalize()


def _aes_cbc_open(key, field):
    iv, body = _split_iv(field, BLOCK, True)
    dec = Cipher(algorithms.AES(key), modes.CBC(iv)).decryptor()
    return _unpad(dec.update(body) + dec.finalize())


def _aead_seal(factory):
    def seal(key, pt, rng):
        nonce = rng.bytes(12)
        return nonce + factory(key).encrypt(nonce, pt, None)
    return seal


def _aead_open(factory):
    def open_(key, field):
        nonce, body = _split_iv(field, 12, False)
        try:
            return factory(key).decrypt(nonce, body, None)
        except InvalidTag as exc:
            raise CipherError("AEAD tag mismatch") from exc
    return open_


# -- Twofish / Serpent in CBC over their ECB block functions ------------------

def _block_cbc(make):
    def seal(key, pt, rng):
        iv = rng.bytes(BLOCK)
        return iv + _cbc_encrypt(make(key).encrypt, iv, _pad(pt))

    def open_(key, field):
        iv, body = _split_iv(field, BLOCK, True)
        return _unpad(_cbc_decrypt(make(key).decrypt, iv, body))

    return seal, open_


_tf_seal, _tf_open = _block_cbc(Twofish)
_sp_seal, _sp_open = _block_cbc(Serpent)

_ALL = {
    NULL_CIPHER: CipherSpec(NULL_CIPHER, "null", _null_seal, _null_open),
    AES_256_CBC: CipherSpec(AES_256_CBC, "aes-256-cbc", _aes_cbc_seal, _aes_cbc_open),
    AES_256_GCM: CipherSpec(AES_256_GCM, "aes-256-gcm", _aead_seal(AESGCM), _aead_open(AESGCM)),
    CHACHA20_POLY1305: CipherSpec(
        CHACHA20_POLY1305, "chacha20-poly1305",
        _aead_seal(ChaCha20Poly1305), _aead_open(ChaCha20Poly1305),
    ),
    SERPENT_256_CBC: CipherSpec(SERPENT_256_CBC, "serpent-256-cbc", _sp_seal, _sp_open),
}

if Twofish is not None:
    _ALL[TWOFISH_256_CBC] = CipherSpec(TWOFISH_256_CBC, "twofish-256-cbc", _tf_seal, _tf_open)

FULL_BUILD = (AES_256_CBC, AES_256_GCM, CHACHA20_POLY1305, TWOFISH_256_CBC, SERPENT_256_CBC)


def registry(limit: int | None = None) -> list[int]:
    """Cipher ids available in a build.

    ``limit`` models a restricted build that ships only the first ``limit``
    ciphers (a two-cipher or one-cipher tool). The null cipher is never listed.
    """
    ids = [c for c in FULL_BUILD if c in _ALL]
    if limit is not None:
        if limit < 1:
            raise ValueError("a build needs at least one cipher")
        ids = ids[:limit]
    return ids


def get(cipher_id: int) -> CipherSpec:
    try:
        return _ALL[cipher_id]
    except KeyError:
        raise CipherUnavailable(f"cipher id {cipher_id} not in registry") from None


def name_of(cipher_id: int) -> str:
    return get(cipher_id).name
