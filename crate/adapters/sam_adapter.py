#!/usr/bin/env python3
"""Reference backend adapter for `mpa`, wrapping a Segment Anything checkpoint.

Run it as an `exec:` backend:

    mpa run --segmenter "exec:python3 adapters/sam_adapter.py --kind segmenter --checkpoint sam_vit_b.pth"
    mpa run --embedder  "exec:python3 adapters/sam_adapter.py --kind embedder --checkpoint sam_vit_b.pth"

or serve one TCP connection with `--listen 127.0.0.1:7000` and point the
pipeline at `tcp://127.0.0.1:7000`.

Protocol: one JSON object per line in each direction.

    -> {"op": "hello"}
    <- {"op": "hello", "kind": "segmenter"}            (embedders add "dim")
    -> {"op": "embed", "id": "...", "image": "/path.png"}
    <- {"op": "result", "id": "...", "vector": [...]}
    -> {"op": "segment", "id": "...", "image": "/path.png",
        "points": [[x, y, label], ...], "box": [x0, y0, x1, y1],
        "mask_logits": "/path.mpal" | null}
    <- {"op": "result", "id": "...", "mask": "/out.png", "confidence": 0.97}
    <- {"op": "error", "id": "...", "message": "..."}

Logit files are `MPAL` grids: magic, then u32 version, height and width
(little endian), then height*width f32 values row-major. Returned masks must
have the image's size.

Needs numpy, Pillow, torch and the `segment_anything` package.
"""

import argparse
import json
import os
import socket
import struct
import sys

import numpy as np
from PIL import Image

SAM_LOGIT_SIZE = 256


def read_mpal(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != b"MPAL":
        raise ValueError(f"{path}: not an MPAL file")
    version, h, w = struct.unpack("<III", raw[4:16])
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version}")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(h, w)


def load_rgb(path):
    return np.asarray(Image.open(path).convert("RGB"))


class Backend:
    def __init__(self, args):
        import torch
        from segment_anything import SamPredictor, sam_model_registry

        device = "cuda" if torch.cuda.is_available() else "cpu"
        sam = sam_model_registry[args.model](checkpoint=args.checkpoint).to(device)
        self.torch = torch
        self.predictor = SamPredictor(sam)
        self.kind = args.kind
        self.out_dir = args.out_dir
        os.makedirs(self.out_dir, exist_ok=True)

    def hello(self):
        reply = {"op": "hello", "kind": self.kind}
        if self.kind == "embedder":
            reply["dim"] = 256
        return reply

    def embed(self, msg):
        self.predictor.set_image(load_rgb(msg["image"]))
        with self.torch.no_grad():
            feats = self.predictor.get_image_embedding()[0]
        return {"vector": feats.mean(dim=(1, 2)).cpu().tolist()}

    def segment(self, msg):
        image = load_rgb(msg["image"])
        h, w = image.shape[:2]
        self.predictor.set_image(image)
        pts = np.array([[p[0], p[1]] for p in msg["points"]], dtype=np.float32)
        labels = np.array([p[2] for p in msg["points"]], dtype=np.int32)
        mask_input = None
        if msg.get("mask_logits"):
            # SAM takes its low-resolution mask prompt at 256x256
            logits = Image.fromarray(read_mpal(msg["mask_logits"]))
            mask_input = np.asarray(logits.resize((SAM_LOGIT_SIZE, SAM_LOGIT_SIZE), Image.BILINEAR))[None]
        masks, scores, _ = self.predictor.predict(
            point_coords=pts if len(pts) else None,
            point_labels=labels if len(pts) else None,
            box=np.array(msg["box"], dtype=np.float32),
            mask_input=mask_input,
            multimask_output=False,
        )
        mask = masks[0].astype(np.uint8) * 255
        assert mask.shape == (h, w)
        safe = "".join(c if c.isalnum() else "_" for c in msg["id"])
        out = os.path.join(self.out_dir, f"{safe}.png")
        Image.fromarray(mask).save(out)
        return {"mask": out, "confidence": float(scores[0])}

    def handle(self, msg):
        op = msg.get("op")
        if op == "hello":
            return self.hello()
        if op == "embed" and self.kind == "embedder":
            body = self.embed(msg)
        elif op == "segment" and self.kind == "segmenter":
            body = self.segment(msg)
        else:
            raise ValueError(f"unsupported op {op!r} for a {self.kind}")
        return {"op": "result", "id": msg["id"], **body}


def serve(backend, lines, write):
    for line in lines:
        if not line.strip():
            continue
        msg = None
        try:
            msg = json.loads(line)
            reply = backend.handle(msg)
        except Exception as e:  # reported to the client, never fatal
            reply = {"op": "error", "id": (msg or {}).get("id"), "message": str(e)}
        write(json.dumps(reply) + "\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kind", choices=["segmenter", "embedder"], required=True)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--model", default="vit_b")
    ap.add_argument("--out-dir", default="sam-out")
    ap.add_argument("--listen", help="host:port for one TCP connection")
    args = ap.parse_args()
    backend = Backend(args)

    if args.listen:
        host, port = args.listen.rsplit(":", 1)
        with socket.create_server((host, int(port))) as srv:
            conn, _ = srv.accept()
            with conn, conn.makefile("r") as rf, conn.makefile("w") as wf:
                serve(backend, rf, lambda s: (wf.write(s), wf.flush()))
    else:
        serve(backend, sys.stdin, lambda s: (sys.stdout.write(s), sys.stdout.flush()))


if __name__ == "__main__":
    main()
