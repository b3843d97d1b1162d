"""Test double for the adapter protocol.

Run as ``python -m rulemap.echo_adapter``. Answers each request line with
canned tokens and returns the raw request text in ``model_info.request``
so callers can check what went over the wire.
"""

from __future__ import annotations

import argparse
import json
import sys
import time


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="rulemap.echo_adapter")
    ap.add_argument("--canned-text", default="[eos]", help="token text returned for every segment")
    ap.add_argument("--canned-file", help="file with one token text line per segment id (overrides --canned-text)")
    ap.add_argument("--sleep", type=float, default=0.0, help="seconds to wait before answering")
    ap.add_argument("--sleep-on", type=int, default=None, help="only sleep on this segment id")
    ap.add_argument("--exit-on", type=int, default=None, help="exit with status 1 on receiving this segment id")
    ap.add_argument("--garbage", action="store_true", help="answer with a non-JSON line")
    ap.add_argument("--echo-cache", action="store_true", help="answer with the request's cache tokens plus [eos]")
    args = ap.parse_args(argv)

    canned = None
    if args.canned_file:
        with open(args.canned_file, encoding="utf-8") as f:
            canned = [line.rstrip("\n") for line in f]

    stdin = sys.stdin.buffer
    stdout = sys.stdout.buffer
    for raw in iter(stdin.readline, b""):
        if not raw.strip():
            continue
        req = json.loads(raw)
        sid = req.get("segment_id")
        if args.exit_on is not None and sid == args.exit_on:
            return 1
        if args.sleep and (args.sleep_on is None or sid == args.sleep_on):
            time.sleep(args.sleep)
        if args.garbage:
            stdout.write(b"this is not json\n")
            stdout.flush()
            continue
        if canned is not None:
            text = canned[sid] if isinstance(sid, int) and 0 <= sid < len(canned) else "[eos]"
        elif args.echo_cache:
            text = (req.get("cache_tokens", "") + " [eos]").strip()
        else:
            text = args.canned_text
        resp = {
            "protocol_version": 1,
            "segment_id": sid,
            "tokens": text,
            "model_info": {"name": "echo", "request": raw.decode("utf-8").rstrip("\n")},
        }
        stdout.write((json.dumps(resp, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8"))
        stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
