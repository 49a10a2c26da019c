#!/usr/bin/env python3
"""Convert a Hugging Face GPT-2 checkpoint into the model directory layout
this project loads.

Input: a directory containing the files published at
https://huggingface.co/openai-community/gpt2 (model.safetensors, config.json,
vocab.json, merges.txt).

Output: a directory with
  - model.safetensors  (renamed tensors, fused qkv split into wq/wk/wv)
  - config.json        (this project's config schema)
  - vocab.json, merges.txt (copied verbatim)

Only numpy is required; the safetensors container is parsed directly.

Usage: python3 scripts/convert_hf_gpt2.py HF_DIR OUT_DIR
"""

import json
import shutil
import sys
from pathlib import Path

import numpy as np


def read_safetensors(path):
    with open(path, "rb") as f:
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len))
        data = f.read()
    tensors = {}
    for name, info in header.items():
        if name == "__metadata__":
            continue
        if info["dtype"] != "F32":
            raise SystemExit(f"tensor {name}: expected F32, got {info['dtype']}")
        begin, end = info["data_offsets"]
        arr = np.frombuffer(data[begin:end], dtype="<f4").reshape(info["shape"])
        tensors[name] = arr
    return tensors


def write_safetensors(path, tensors):
    header = {}
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(blob)],
        }
        offset += len(blob)
        blobs.append(blob)
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def main():
    if len(sys.argv) != 3:
        raise SystemExit(__doc__)
    src = Path(sys.argv[1])
    dst = Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)

    hf_cfg = json.loads((src / "config.json").read_text())
    d_model = hf_cfg["n_embd"]
    n_heads = hf_cfg["n_head"]
    config = {
        "n_layers": hf_cfg["n_layer"],
        "n_heads": n_heads,
        "d_model": d_model,
        "d_head": d_model // n_heads,
        "d_mlp": hf_cfg.get("n_inner") or 4 * d_model,
        "vocab_size": hf_cfg["vocab_size"],
        "max_seq_len": hf_cfg.get("n_positions") or hf_cfg["n_ctx"],
        "ln_epsilon": hf_cfg.get("layer_norm_epsilon", 1e-5),
        "activation": "gelu",
    }
    (dst / "config.json").write_text(json.dumps(config, indent=2))

    hf = read_safetensors(src / "model.safetensors")
    out = {
        "wte": hf["wte.weight"],
        "wpe": hf["wpe.weight"],
        "ln_f.weight": hf["ln_f.weight"],
        "ln_f.bias": hf["ln_f.bias"],
    }
    for l in range(config["n_layers"]):
        hfp = f"h.{l}"
        p = f"layers.{l}"
        out[f"{p}.ln1.weight"] = hf[f"{hfp}.ln_1.weight"]
        out[f"{p}.ln1.bias"] = hf[f"{hfp}.ln_1.bias"]
        # HF stores the fused qkv projection as a Conv1D weight [d, 3d]
        # acting as y = x @ W + b, the same convention this project uses.
        w = hf[f"{hfp}.attn.c_attn.weight"]
        b = hf[f"{hfp}.attn.c_attn.bias"]
        for i, part in enumerate(("q", "k", "v")):
            out[f"{p}.attn.w{part}"] = w[:, i * d_model : (i + 1) * d_model]
            out[f"{p}.attn.b{part}"] = b[i * d_model : (i + 1) * d_model]
        out[f"{p}.attn.wo"] = hf[f"{hfp}.attn.c_proj.weight"]
        out[f"{p}.attn.bo"] = hf[f"{hfp}.attn.c_proj.bias"]
        out[f"{p}.ln2.weight"] = hf[f"{hfp}.ln_2.weight"]
        out[f"{p}.ln2.bias"] = hf[f"{hfp}.ln_2.bias"]
        out[f"{p}.mlp.w_in"] = hf[f"{hfp}.mlp.c_fc.weight"]
        out[f"{p}.mlp.b_in"] = hf[f"{hfp}.mlp.c_fc.bias"]
        out[f"{p}.mlp.w_out"] = hf[f"{hfp}.mlp.c_proj.weight"]
        out[f"{p}.mlp.b_out"] = hf[f"{hfp}.mlp.c_proj.bias"]

    write_safetensors(dst / "model.safetensors", out)
    shutil.copy(src / "vocab.json", dst / "vocab.json")
    shutil.copy(src / "merges.txt", dst / "merges.txt")
    print(f"wrote {dst}")


if __name__ == "__main__":
    main()
