"""Wire schema round-trips, the binary model codec, and the token lifecycle."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flaas.errors import AuthExpired, AuthInvalid, DecodeError, InvalidInput
from flaas.flmath import init_model
from flaas.protocol import (
    ACCESS_TOKEN_TTL,
    REFRESH_TOKEN_TTL,
    DeviceStatus,
    ModelBlob,
    PolicySpec,
    SharingLimit,
    TokenStore,
    TrainingRequest,
    TrainingResults,
    decode_model,
    encode_model,
)

T0 = 1_700_000_000.0


# --- model blob -----------------------------------------------------------------


def test_blob_payload_length():
    blob = encode_model(init_model(4, 32, 10, seed=7))
    assert len(blob.payload) == 490 * 4 == 1960
    assert len(blob.to_bytes()) == 1960 + 12


def test_blob_round_trip_precision():
    params = init_model(16, 8, 5, seed=3)
    decoded = decode_model(ModelBlob.from_bytes(encode_model(params).to_bytes()))
    rel = np.abs(decoded.weights - params.weights) / np.maximum(np.abs(params.weights), 1e-12)
    nonzero = params.weights != 0
    assert float(rel[nonzero].max()) <= 1e-6
    assert np.array_equal(decoded.weights[~nonzero], params.weights[~nonzero])


def test_blob_truncated_payload():
    raw = encode_model(init_model(4, 4, 3, seed=0)).to_bytes()
    with pytest.raises(DecodeError, match="truncated payload"):
        ModelBlob.from_bytes(raw[:-1])
    with pytest.raises(DecodeError, match="truncated header"):
        ModelBlob.from_bytes(raw[:8])
    with pytest.raises(DecodeError):
        ModelBlob.from_bytes(raw + b"\x00\x00\x00\x00")


def test_encode_deterministic():
    params = init_model(4, 4, 3, seed=1)
    assert encode_model(params).to_bytes() == encode_model(params).to_bytes()


# --- message schemas --------------------------------------------------------------


def test_device_status_round_trip():
    status = DeviceStatus("dev1", 82, False, 1024, T0)
    assert DeviceStatus.from_wire(status.to_wire()) == status
    with pytest.raises(InvalidInput):
        DeviceStatus("dev1", 101, False, 1024, T0)


def test_training_request_round_trip():
    req = TrainingRequest("r1", T0 + 60, "proj", 3, "JS")
    assert TrainingRequest.from_wire(req.to_wire()) == req
    with pytest.raises(InvalidInput):
        TrainingRequest("r1", T0, "proj", 1, "XX")


def test_training_results_round_trip_and_validation():
    durations = {"join": 1, "load_samples": 2, "train": 3, "merge": 0, "report": 1}
    res = TrainingResults("proj", 2, "dev1", 0.5, 450, durations)
    assert TrainingResults.from_wire(res.to_wire()) == res
    with pytest.raises(InvalidInput):
        TrainingResults("proj", 2, "dev1", 0.5, 0, durations)
    with pytest.raises(InvalidInput):
        TrainingResults("proj", 2, "dev1", 0.5, 10, {"join": 1})


def test_policy_round_trip():
    policy = PolicySpec(
        share_kind="model",
        sharing_limit=SharingLimit(kind="n_times", n=3),
        min_local_loss=1.5,
    )
    assert PolicySpec.from_wire(policy.to_wire()) == policy


def test_sharing_limit_semantics():
    assert SharingLimit(kind="once").permits(0, T0)
    assert not SharingLimit(kind="once").permits(1, T0)
    assert SharingLimit(kind="n_times", n=2).permits(1, T0)
    assert not SharingLimit(kind="n_times", n=2).permits(2, T0)
    assert SharingLimit(kind="until", until=T0 + 1).permits(99, T0)
    assert not SharingLimit(kind="until", until=T0).permits(0, T0)
    assert SharingLimit().permits(10**6, T0)


# --- tokens ------------------------------------------------------------------------


def test_access_token_boundaries():
    store = TokenStore(secret=b"s" * 32)
    pair = store.issue("dev9", T0)
    assert store.validate(pair.access_token, T0 + ACCESS_TOKEN_TTL - 1) == "dev9"
    with pytest.raises(AuthExpired):
        store.validate(pair.access_token, T0 + ACCESS_TOKEN_TTL + 1)


def test_access_token_expiry_is_permanent():
    store = TokenStore(secret=b"s" * 32)
    pair = store.issue("dev9", T0)
    with pytest.raises(AuthExpired):
        store.validate(pair.access_token, T0 + 601)
    # once expired, the same token never validates again, even at earlier times
    with pytest.raises(AuthExpired):
        store.validate(pair.access_token, T0 + 602)


def test_refresh_rotation_single_use():
    store = TokenStore(secret=b"s" * 32)
    pair = store.issue("dev9", T0)
    newpair = store.refresh(pair.refresh_token, T0 + 100)
    assert newpair.refresh_token != pair.refresh_token
    assert store.validate(newpair.access_token, T0 + 101) == "dev9"
    with pytest.raises(AuthInvalid):
        store.refresh(pair.refresh_token, T0 + 100)


def test_refresh_expires_after_a_day():
    store = TokenStore(secret=b"s" * 32)
    pair = store.issue("dev9", T0)
    with pytest.raises(AuthInvalid):
        store.refresh(pair.refresh_token, T0 + 25 * 3600)
    fresh = store.issue("dev9", T0)
    rotated = store.refresh(fresh.refresh_token, T0 + REFRESH_TOKEN_TTL - 1)
    assert rotated.access_token


def test_token_tamper_rejected():
    store = TokenStore(secret=b"s" * 32)
    pair = store.issue("dev9", T0)
    with pytest.raises(AuthInvalid):
        store.validate(pair.access_token[:-2] + "zz", T0 + 1)
    with pytest.raises(AuthInvalid):
        store.validate(pair.refresh_token, T0 + 1)  # wrong kind
    other = TokenStore(secret=b"x" * 32)
    with pytest.raises(AuthInvalid):
        other.validate(pair.access_token, T0 + 1)


def test_revoked_access_token():
    store = TokenStore(secret=b"s" * 32)
    pair = store.issue("dev9", T0)
    store.revoke_access(pair.access_token)
    with pytest.raises(AuthInvalid):
        store.validate(pair.access_token, T0 + 1)


@given(st.floats(0, 2 * ACCESS_TOKEN_TTL))
def test_token_monotonicity(offset):
    """Once validate fails with auth-expired, it never succeeds later."""
    store = TokenStore(secret=b"s" * 32)
    pair = store.issue("d", T0)
    expired_at_offset = offset >= ACCESS_TOKEN_TTL
    try:
        store.validate(pair.access_token, T0 + offset)
        assert not expired_at_offset
    except AuthExpired:
        assert expired_at_offset
        with pytest.raises(AuthExpired):
            store.validate(pair.access_token, T0 + offset + 1.0)
