"""Hybrid encryption for server/client traffic.

Every client owns an RSA key pair.  Each round the server derives a fresh
256-bit AES key with scrypt, wraps it for every client with RSA-OAEP
(SHA-256/MGF1) and seals model payloads with AES-256-GCM.  The envelope
header is fed to GCM as associated data, so it is authenticated along with
the ciphertext.

Envelope layout (little-endian)::

    magic "FPY1" | version u8 | round u32 | sender u16 | kind u8
    | nonce 12B | tag 16B | ciphertext_len u32 | ciphertext

The first 12 bytes (magic through kind) are the associated data.
"""

from __future__ import annotations

import enum
import hashlib
import secrets
import struct
import threading
from dataclasses import dataclass, field
from typing import Protocol

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.scrypt import Scrypt

from .errors import (
    AuthFailure,
    BadMagic,
    DecryptFailure,
    EncryptFailure,
    KeyTooSmall,
    NonceReuseDetected,
    RngFailure,
    RoundMismatch,
    TruncatedPayload,
    UnknownVersion,
)

RSA_BITS = 2048
KEY_LEN = 32
SALT_LEN = 16
PASSPHRASE_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16
SCRYPT_N = 2 ** 14
SCRYPT_R = 8
SCRYPT_P = 1

ENVELOPE_MAGIC = b"FPY1"
ENVELOPE_VERSION = 1
_AAD = struct.Struct("<4sBIHB")
AAD_SIZE = _AAD.size
ENVELOPE_OVERHEAD = AAD_SIZE + NONCE_LEN + TAG_LEN + 4


class PayloadKind(enum.IntEnum):
    PUBKEY = 1
    WRAPPED_KEY = 2
    GLOBAL_MODEL = 3
    CLIENT_UPDATE = 4


# --- randomness ------------------------------------------------------------


class RandomSource(Protocol):
    def token_bytes(self, n: int) -> bytes: ...


class SystemRandom:
    """Operating-system CSPRNG via :mod:`secrets`."""

    def token_bytes(self, n: int) -> bytes:
        return secrets.token_bytes(n)


class SeededRandom:
    """Deterministic SHAKE-256 byte stream for reproducible simulations.

    Not for deployment: anyone who knows the seed can recompute every key and
    nonce.
    """

    def __init__(self, seed: int, label: str = ""):
        self._prefix = f"securefl/{int(seed)}/{label}/".encode()
        self._counter = 0
        self._lock = threading.Lock()

    def token_bytes(self, n: int) -> bytes:
        with self._lock:
            block = hashlib.shake_256(self._prefix + str(self._counter).encode()).digest(n)
            self._counter += 1
        return block


def _draw(rng: RandomSource, n: int) -> bytes:
    try:
        out = rng.token_bytes(n)
    except Exception as exc:
        raise RngFailure(f"random source failed: {exc}") from exc
    if not isinstance(out, (bytes, bytearray)) or len(out) != n:
        raise RngFailure(f"random source returned {len(out) if out is not None else 0} bytes, wanted {n}")
    return bytes(out)


# --- key material ----------------------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    private: rsa.RSAPrivateKey
    public: rsa.RSAPublicKey

    @classmethod
    def generate(cls, bits: int = RSA_BITS) -> "KeyPair":
        private = rsa.generate_private_key(public_exponent=65537, key_size=bits)
        return cls(private, private.public_key())

    def public_bytes(self) -> bytes:
        return public_key_bytes(self.public)


def public_key_bytes(pk: rsa.RSAPublicKey) -> bytes:
    return pk.public_bytes(serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo)


def load_public_key(der: bytes) -> rsa.RSAPublicKey:
    try:
        key = serialization.load_der_public_key(der)
    except ValueError as exc:
        raise DecryptFailure(f"malformed public key: {exc}") from exc
    if not isinstance(key, rsa.RSAPublicKey):
        raise DecryptFailure("public key is not RSA")
    return key


@dataclass(frozen=True)
class RoundKey:
    round: int
    secret: bytes = field(repr=False)
    salt: bytes

    def __post_init__(self):
        if len(self.secret) != KEY_LEN or len(self.salt) != SALT_LEN:
            raise ValueError("round key needs a 32-byte secret and a 16-byte salt")

    @property
    def key_id(self) -> bytes:
        return hashlib.sha256(b"key-id" + self.secret).digest()[:16]


def derive_secret(passphrase: bytes, salt: bytes, length: int = KEY_LEN) -> bytes:
    """scrypt(passphrase, salt) with N=2^14, r=8, p=1."""
    kdf = Scrypt(salt=salt, length=length, n=SCRYPT_N, r=SCRYPT_R, p=SCRYPT_P)
    return kdf.derive(passphrase)


def gen_round_key(round: int, rng: RandomSource | None = None) -> RoundKey:
    rng = rng or SystemRandom()
    passphrase = _draw(rng, PASSPHRASE_LEN)
    salt = _draw(rng, SALT_LEN)
    return RoundKey(int(round), derive_secret(passphrase, salt), salt)


_OAEP = padding.OAEP(mgf=padding.MGF1(algorithm=hashes.SHA256()), algorithm=hashes.SHA256(), label=None)


def wrap_key(rk: RoundKey, pk: rsa.RSAPublicKey) -> bytes:
    """RSA-OAEP encryption of ``secret || salt``."""
    if pk.key_size < RSA_BITS:
        raise KeyTooSmall(f"RSA modulus of {pk.key_size} bits, need >= {RSA_BITS}")
    try:
        return pk.encrypt(rk.secret + rk.salt, _OAEP)
    except ValueError as exc:
        raise EncryptFailure(str(exc)) from exc


def unwrap_key(blob: bytes, private: rsa.RSAPrivateKey, round: int) -> RoundKey:
    try:
        raw = private.decrypt(bytes(blob), _OAEP)
    except ValueError as exc:
        raise DecryptFailure("cannot unwrap round key") from exc
    if len(raw) != KEY_LEN + SALT_LEN:
        raise DecryptFailure("unwrapped key has the wrong length")
    return RoundKey(int(round), raw[:KEY_LEN], raw[KEY_LEN:])


# --- envelopes -------------------------------------------------------------


@dataclass(frozen=True)
class EncryptedEnvelope:
    version: int
    round: int
    sender_id: int
    kind: PayloadKind
    nonce: bytes
    tag: bytes
    ciphertext: bytes

    def header_bytes(self) -> bytes:
        return _AAD.pack(ENVELOPE_MAGIC, self.version, self.round, self.sender_id, int(self.kind))

    def to_bytes(self) -> bytes:
        return b"".join([
            self.header_bytes(), self.nonce, self.tag,
            struct.pack("<I", len(self.ciphertext)), self.ciphertext,
        ])

    def __len__(self) -> int:
        return ENVELOPE_OVERHEAD + len(self.ciphertext)

    @classmethod
    def from_bytes(cls, b: bytes) -> "EncryptedEnvelope":
        b = bytes(b)
        if len(b) < 4 or b[:4] != ENVELOPE_MAGIC:
            raise BadMagic("not an envelope")
        if len(b) < ENVELOPE_OVERHEAD:
            raise TruncatedPayload("envelope header truncated")
        _, version, rnd, sender, kind = _AAD.unpack_from(b, 0)
        if version != ENVELOPE_VERSION:
            raise UnknownVersion(f"envelope version {version}")
        pos = AAD_SIZE
        nonce = b[pos:pos + NONCE_LEN]
        pos += NONCE_LEN
        tag = b[pos:pos + TAG_LEN]
        pos += TAG_LEN
        (n,) = struct.unpack_from("<I", b, pos)
        pos += 4
        if len(b) != pos + n:
            raise TruncatedPayload(f"ciphertext length {n} does not match {len(b) - pos} remaining bytes")
        try:
            kind = PayloadKind(kind)
        except ValueError:
            raise UnknownVersion(f"unknown payload kind {kind}") from None
        return cls(version, rnd, sender, kind, nonce, tag, b[pos:])


class NonceRegistry:
    """Remembers every nonce used per key in this process."""

    def __init__(self):
        self._seen: dict[bytes, set[bytes]] = {}
        self._lock = threading.Lock()

    def claim(self, key_id: bytes, nonce: bytes) -> None:
        with self._lock:
            used = self._seen.setdefault(key_id, set())
            if nonce in used:
                raise NonceReuseDetected("nonce already used under this key")
            used.add(nonce)

    def forget(self, key_id: bytes) -> None:
        with self._lock:
            self._seen.pop(key_id, None)


default_registry = NonceRegistry()


def gcm_encrypt(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes) -> tuple[bytes, bytes]:
    out = AESGCM(key).encrypt(nonce, plaintext, aad)
    return out[:-TAG_LEN], out[-TAG_LEN:]


def gcm_decrypt(key: bytes, nonce: bytes, ciphertext: bytes, tag: bytes, aad: bytes) -> bytes:
    return AESGCM(key).decrypt(nonce, ciphertext + tag, aad)


def seal(rk: RoundKey, kind: PayloadKind, plaintext: bytes, rng: RandomSource | None = None,
         sender_id: int = 0, registry: NonceRegistry | None = None) -> EncryptedEnvelope:
    """Encrypt ``plaintext`` under the round key with a fresh random nonce."""
    if not plaintext:
        raise EncryptFailure("refusing to seal an empty payload")
    rng = rng or SystemRandom()
    registry = registry or default_registry
    nonce = _draw(rng, NONCE_LEN)
    registry.claim(rk.key_id, nonce)
    header = EncryptedEnvelope(ENVELOPE_VERSION, rk.round, sender_id, PayloadKind(kind), b"", b"", b"")
    ct, tag = gcm_encrypt(rk.secret, nonce, bytes(plaintext), header.header_bytes())
    return EncryptedEnvelope(ENVELOPE_VERSION, rk.round, sender_id, PayloadKind(kind), nonce, tag, ct)


def open_envelope(env: EncryptedEnvelope, rk: RoundKey) -> tuple[PayloadKind, bytes]:
    """Verify and decrypt; nothing is returned unless the tag checks out."""
    if env.round != rk.round:
        raise RoundMismatch(f"envelope from round {env.round} opened with round-{rk.round} key",
                            env.sender_id)
    try:
        plaintext = gcm_decrypt(rk.secret, env.nonce, env.ciphertext, env.tag, env.header_bytes())
    except InvalidTag:
        raise AuthFailure(sender_id=env.sender_id) from None
    return env.kind, plaintext


def plain_envelope(kind: PayloadKind, round: int, sender_id: int, payload: bytes) -> EncryptedEnvelope:
    """Unencrypted frame for public keys and RSA-wrapped round keys."""
    if kind not in (PayloadKind.PUBKEY, PayloadKind.WRAPPED_KEY):
        raise EncryptFailure(f"{PayloadKind(kind).name} payloads must be sealed")
    return EncryptedEnvelope(ENVELOPE_VERSION, round, sender_id, kind,
                             bytes(NONCE_LEN), bytes(TAG_LEN), bytes(payload))


def open_wire(data: bytes, rk: RoundKey) -> tuple[PayloadKind, bytes]:
    """Parse and open a serialized envelope.

    A frame that fails to parse cannot be authenticated, so parse errors are
    reported as :class:`AuthFailure` as well.
    """
    try:
        env = EncryptedEnvelope.from_bytes(data)
    except (BadMagic, UnknownVersion, TruncatedPayload) as exc:
        raise AuthFailure(f"malformed envelope: {exc}") from exc
    return open_envelope(env, rk)
