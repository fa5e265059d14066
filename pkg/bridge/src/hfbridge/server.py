"""Serve transformer checkpoints over the newline-delimited JSON logit protocol.

The bridge owns the model forward pass and the tokenizer; it never samples.
All randomness lives on the client side, which keeps the ownership of the
sampling noise unambiguous. Each request gets exactly one response line, in
order. Two model slots are served over one endpoint: the original checkpoint
and an optional counterfactual one (a second checkpoint and/or an additive
residual-stream steering vector); requests select a slot with
``{"config": {"model": "cf"}}`` and may override the steering scale with
``{"config": {"steer_scale": s}}``.
"""

from __future__ import annotations

import json
import logging
import socketserver
import sys
import threading
from dataclasses import dataclass

import numpy as np
import torch

log = logging.getLogger("hfbridge")


@dataclass
class BridgeConfig:
    model: str
    cf_model: str | None = None
    steer_vector: str | None = None
    steer_layer: int | None = None
    device: str = "cpu"
    max_prefix: int = 1024


class BridgeError(Exception):
    pass


def _decoder_blocks(model) -> list:
    """The per-layer decoder blocks, across the common architectures."""
    for path in ("transformer.h", "model.layers", "gpt_neox.layers"):
        obj = model
        try:
            for part in path.split("."):
                obj = getattr(obj, part)
        except AttributeError:
            continue
        return list(obj)
    raise BridgeError("cannot locate decoder blocks on this architecture")


class ModelSlot:
    """One loaded checkpoint, optionally with a steering vector at one layer."""

    def __init__(self, model_dir: str, device: str, steer_vector: np.ndarray | None = None,
                 steer_layer: int | None = None):
        from transformers import AutoModelForCausalLM

        self.model = AutoModelForCausalLM.from_pretrained(model_dir)
        self.model.to(device)
        self.model.eval()
        self.device = device
        self.vocab_size = int(self.model.config.vocab_size)
        self._steer_scale = 0.0
        self._lock = threading.Lock()
        if steer_vector is not None:
            if steer_layer is None:
                raise BridgeError("steering vector given without --steer-layer")
            blocks = _decoder_blocks(self.model)
            if not 0 <= steer_layer < len(blocks):
                raise BridgeError(f"steer layer {steer_layer} out of range (0..{len(blocks) - 1})")
            vec = torch.tensor(np.asarray(steer_vector, dtype=np.float32), device=device)
            hidden = int(self.model.config.hidden_size)
            if vec.shape != (hidden,):
                raise BridgeError(f"steering vector has shape {tuple(vec.shape)}, expected ({hidden},)")
            self._steer_scale = 1.0

            def hook(_module, _inputs, output):
                # additive mean-shift on the residual stream, every position
                if self._steer_scale == 0.0:
                    return output
                if isinstance(output, tuple):
                    return (output[0] + self._steer_scale * vec,) + output[1:]
                return output + self._steer_scale * vec

            blocks[steer_layer].register_forward_hook(hook)

    def next_logits(self, prefix_ids: list[int], steer_scale: float | None = None) -> np.ndarray:
        ids = torch.tensor([prefix_ids], dtype=torch.long, device=self.device)
        with self._lock:
            previous = self._steer_scale
            if steer_scale is not None:
                self._steer_scale = float(steer_scale)  # no-op unless a hook was installed
            try:
                with torch.inference_mode():
                    logits = self.model(ids).logits[0, -1]
            finally:
                self._steer_scale = previous
        return logits.float().cpu().numpy()


class Bridge:
    """Tokenizer plus the original / counterfactual model slots."""

    def __init__(self, config: BridgeConfig):
        from transformers import AutoTokenizer

        self.config = config
        self.tokenizer = AutoTokenizer.from_pretrained(config.model)
        if self.tokenizer.eos_token_id is None:
            raise BridgeError("tokenizer has no EOS token; the protocol requires one")
        steer = None
        if config.steer_vector is not None:
            steer = _load_vector(config.steer_vector)
        self.original = ModelSlot(config.model, config.device)
        if config.cf_model or steer is not None:
            self.cf = ModelSlot(
                config.cf_model or config.model, config.device,
                steer_vector=steer, steer_layer=config.steer_layer,
            )
        else:
            self.cf = None
        self.vocab_size = self.original.vocab_size
        self._symbols = self._build_symbols()

    def _build_symbols(self) -> list[str]:
        symbols = []
        known = self.tokenizer.convert_ids_to_tokens(list(range(min(len(self.tokenizer), self.vocab_size))))
        for i in range(self.vocab_size):
            tok = known[i] if i < len(known) else None
            # model vocab may be padded past the tokenizer; keep the mapping a bijection
            symbols.append(tok if tok is not None else f"<unused:{i}>")
        return symbols

    def _bos_prefix(self) -> list[int]:
        bos = self.tokenizer.bos_token_id
        if bos is None:
            bos = self.tokenizer.eos_token_id
        return [int(bos)]

    def _slot(self, config: dict | None) -> tuple[ModelSlot, float | None]:
        config = config or {}
        which = config.get("model", "original")
        scale = config.get("steer_scale")
        if which in ("original", "orig"):
            return self.original, None
        if which == "cf":
            if self.cf is None:
                raise BridgeError("no counterfactual model configured (--cf-model/--steer-vector)")
            return self.cf, scale
        raise BridgeError(f"unknown model selector {which!r}")

    def handle(self, obj) -> dict:
        if not isinstance(obj, dict) or "op" not in obj:
            return {"ok": False, "error": "request must be an object with an 'op' field"}
        op = obj["op"]
        try:
            if op == "logits":
                prefix = [int(t) for t in obj["prefix"]]
                if any(not 0 <= t < self.vocab_size for t in prefix):
                    raise BridgeError("token id out of range")
                if len(prefix) > self.config.max_prefix:
                    raise BridgeError(f"prefix longer than {self.config.max_prefix}")
                slot, scale = self._slot(obj.get("config"))
                logits = slot.next_logits(prefix or self._bos_prefix(), steer_scale=scale)
                return {"ok": True, "logits": [float(x) for x in logits]}
            if op == "encode":
                ids = self.tokenizer(str(obj["text"]), add_special_tokens=False)["input_ids"]
                return {"ok": True, "ids": [int(t) for t in ids]}
            if op == "decode":
                ids = [int(t) for t in obj["ids"]]
                if any(not 0 <= t < self.vocab_size for t in ids):
                    raise BridgeError("token id out of range")
                return {"ok": True, "text": self.tokenizer.decode(ids)}
            if op == "vocab":
                return {
                    "ok": True,
                    "symbols": self._symbols,
                    "eos_id": int(self.tokenizer.eos_token_id),
                }
            return {"ok": False, "error": f"unknown op {op!r}"}
        except (BridgeError, KeyError, TypeError, ValueError) as exc:
            return {"ok": False, "error": str(exc)}

    # --- startup self-test ----------------------------------------------

    def self_test(self, draws: int = 20_000, top: int = 20, seed: int = 0) -> dict:
        """Determinism plus Gumbel-max-vs-softmax agreement on one prefix.

        Client-side sampling adds Gumbel noise to the returned logits and takes
        the argmax; over many draws the hit frequencies of the most probable
        tokens must match their softmax probabilities (TV < 0.02, remaining
        mass bucketed).
        """
        prefix = self._bos_prefix()
        a = self.original.next_logits(prefix)
        b = self.original.next_logits(prefix)
        max_diff = float(np.max(np.abs(a - b)))
        logits = np.asarray(a, dtype=np.float64)
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        rng = np.random.default_rng(seed)
        hits = np.zeros(self.vocab_size, dtype=np.int64)
        block = 2000
        done = 0
        while done < draws:
            m = min(block, draws - done)
            noise = -np.log(-np.log(rng.random((m, self.vocab_size))))
            picks = np.argmax(logits[None, :] + noise, axis=1)
            hits += np.bincount(picks, minlength=self.vocab_size)
            done += m
        top_ids = np.argsort(-probs)[:top]
        emp_top = hits[top_ids] / draws
        ref_top = probs[top_ids]
        tv = 0.5 * (np.abs(emp_top - ref_top).sum() + abs((1 - emp_top.sum()) - (1 - ref_top.sum())))
        report = {
            "determinism_max_abs_diff": max_diff,
            "gumbel_vs_softmax_tv": float(tv),
            "ok": bool(max_diff == 0.0 and tv < 0.02),
        }
        if not report["ok"]:
            raise BridgeError(f"self-test failed: {report}")
        return report


def _load_vector(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        return np.load(path)
    with open(path, encoding="utf-8") as fh:
        return np.asarray(json.load(fh), dtype=np.float32)


# --- transports ---------------------------------------------------------


def serve_stdio(bridge: Bridge, stdin=None, stdout=None) -> None:
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            reply = bridge.handle(json.loads(line))
        except json.JSONDecodeError as exc:
            reply = {"ok": False, "error": f"malformed JSON: {exc}"}
        stdout.write((json.dumps(reply) + "\n").encode("utf-8"))
        stdout.flush()


class BridgeServer:
    """Threaded TCP endpoint; one in-flight request per connection."""

    def __init__(self, bridge: Bridge, host: str = "127.0.0.1", port: int = 0):
        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                while True:
                    line = self.rfile.readline()
                    if not line:
                        return
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        reply = bridge.handle(json.loads(line))
                    except json.JSONDecodeError as exc:
                        reply = {"ok": False, "error": f"malformed JSON: {exc}"}
                    self.wfile.write((json.dumps(reply) + "\n").encode("utf-8"))
                    self.wfile.flush()

        class Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True

        self._server = Server((host, port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def shutdown(self):
        self._server.shutdown()
        self._server.server_close()
