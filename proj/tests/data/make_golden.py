#!/usr/bin/env python3
"""Writes golden_tiny.kvfw, a hand-laid-out KVFW file used by the C++ tests.

Written with `struct` directly from the format description, independent of
the C++ writer. Payloads are stored in reverse directory order with no
alignment padding, so readers must honour the recorded offsets.

Value of element i of the k-th tensor (directory order): k + i / 64.
"""
import struct
import sys

N_LAYERS, N_HEADS, N_KV, D_MODEL, D_HEAD, D_FF, VOCAB, MAX_POS = 1, 2, 1, 4, 2, 3, 5, 16
ROPE_THETA, NORM_EPS = 10000.0, 1e-5

tensors = [("token_embedding", [VOCAB, D_MODEL])]
for i in range(N_LAYERS):
    p = f"layer.{i}."
    tensors += [
        (p + "attn_norm", [D_MODEL]),
        (p + "attn.wq", [D_MODEL, N_HEADS * D_HEAD]),
        (p + "attn.wk", [D_MODEL, N_KV * D_HEAD]),
        (p + "attn.wv", [D_MODEL, N_KV * D_HEAD]),
        (p + "attn.wo", [N_HEADS * D_HEAD, D_MODEL]),
        (p + "mlp_norm", [D_MODEL]),
        (p + "mlp.w_gate", [D_MODEL, D_FF]),
        (p + "mlp.w_up", [D_MODEL, D_FF]),
        (p + "mlp.w_down", [D_FF, D_MODEL]),
    ]
tensors += [("final_norm", [D_MODEL]), ("lm_head", [D_MODEL, VOCAB])]


def count(shape):
    n = 1
    for d in shape:
        n *= d
    return n


header = b"KVFW" + struct.pack("<I", 1)
header += struct.pack("<8I", N_LAYERS, N_HEADS, N_KV, D_MODEL, D_HEAD, D_FF, VOCAB, MAX_POS)
header += struct.pack("<2f", ROPE_THETA, NORM_EPS)
header += struct.pack("<I", len(tensors))

dir_size = sum(4 + len(n.encode()) + 1 + 4 + 8 * len(s) + 8 for n, s in tensors)
cursor = len(header) + dir_size
offsets = {}
for name, shape in reversed(tensors):
    offsets[name] = cursor
    cursor += 4 * count(shape)

directory = b""
for name, shape in tensors:
    enc = name.encode()
    directory += struct.pack("<I", len(enc)) + enc + struct.pack("<B", 0)
    directory += struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}Q", *shape)
    directory += struct.pack("<Q", offsets[name])

payload = b""
for k, (name, shape) in reversed(list(enumerate(tensors))):
    payload += struct.pack(f"<{count(shape)}f", *[k + i / 64 for i in range(count(shape))])

out = sys.argv[1] if len(sys.argv) > 1 else "golden_tiny.kvfw"
with open(out, "wb") as f:
    f.write(header + directory + payload)
