"""Command-line surface: fuse, targets, kd, bench, stats, serve.

Every data command is a thin client of the service API. By default the
requests run against an in-process app instance; --server points them at a
running daemon instead. Exit codes: 0 success, 1 usage, 2 invalid input,
3 internal failure.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path

import httpx

from .config import THREADS_ENV_VAR, RunConfig, resolve_config
from .errors import InputError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_INTERNAL = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class ServiceClient:
    """POST requests to a remote server, or to an in-process app."""

    def __init__(self, server: str | None):
        self._server = server.rstrip("/") if server else None
        self._app = None
        if self._server is None:
            from .service import create_app

            self._app = create_app()

    def request(self, method: str, path: str, payload: dict | None = None):
        if self._server is not None:
            with httpx.Client(base_url=self._server, timeout=600.0) as client:
                response = client.request(method, path, json=payload)
        else:
            response = asyncio.run(self._request_in_process(method, path, payload))
        try:
            body = response.json()
        except ValueError:
            body = {"detail": response.text}
        return response.status_code, body

    async def _request_in_process(self, method: str, path: str, payload: dict | None):
        transport = httpx.ASGITransport(app=self._app)
        async with httpx.AsyncClient(transport=transport, base_url="http://shapefuse") as client:
            return await client.request(method, path, json=payload)


def _abs(path: str) -> str:
    return str(Path(path).resolve())


def _finish(status: int, body: dict, args, render) -> int:
    """Map HTTP status to exit code and print the result."""
    if status == 200:
        if args.json:
            print(json.dumps(body, indent=2))
        else:
            render(body)
        return EXIT_OK
    detail = body.get("detail", body)
    if status in (400, 422):
        print(f"error: {detail}", file=sys.stderr)
        return EXIT_INPUT
    print(f"internal error (HTTP {status}): {detail}", file=sys.stderr)
    return EXIT_INTERNAL


def _render_fuse(body: dict) -> None:
    for name, ms in body["stage_ms"].items():
        print(f"{name:>10}: {ms:8.2f} ms")
    print(f"{'total':>10}: {body['total_ms']:8.2f} ms")
    for name, path in body["outputs"].items():
        print(f"wrote {name}: {path}")


def cmd_fuse(args, config: RunConfig, client: ServiceClient) -> int:
    if args.batch:
        payload = {
            "input_dir": _abs(args.batch),
            "out_dir": _abs(args.out_dir),
            "workers": config.threads,
            "window": config.window,
            "k1": config.k1,
            "k2": config.k2,
            "write_png": args.png,
        }
        status, body = client.request("POST", "/fuse/batch", payload)

        def render(b: dict) -> None:
            print(f"fused {b['count']} pairs with {b['workers']} workers in {b['seconds']:.3f} s")
            for result in b["results"]:
                for name, path in result["outputs"].items():
                    print(f"wrote {name}: {path}")

        return _finish(status, body, args, render)
    payload = {
        "rgb_path": _abs(args.rgb),
        "thermal_path": _abs(args.thermal),
        "out_dir": _abs(args.out_dir),
        "window": config.window,
        "k1": config.k1,
        "k2": config.k2,
        "write_png": args.png,
    }
    status, body = client.request("POST", "/fuse", payload)
    return _finish(status, body, args, _render_fuse)


def cmd_targets(args, config: RunConfig, client: ServiceClient) -> int:
    annotations_path = Path(args.annotations)
    try:
        doc = json.loads(annotations_path.read_text())
    except OSError as exc:
        print(f"error: cannot read {annotations_path}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON in {annotations_path}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    payload = {
        "annotations": doc,
        "num_classes": args.classes,
        "out_dir": _abs(args.out_dir),
        "name": annotations_path.stem,
        "lam": config.lam,
    }
    if args.crop_probs:
        payload["crop_probs_path"] = _abs(args.crop_probs)
    status, body = client.request("POST", "/targets", payload)

    def render(b: dict) -> None:
        print(f"classes present: {[i for i, v in enumerate(b['q']) if v > 0]}")
        print(f"boxes rasterized: {b['n_boxes']}")
        if b.get("q_tilde") is not None:
            print(f"q_hat:   {[round(v, 6) for v in b['q_hat']]}")
            print(f"q_tilde: {[round(v, 6) for v in b['q_tilde']]}")
        for name, path in b["outputs"].items():
            print(f"wrote {name}: {path}")

    return _finish(status, body, args, render)


def cmd_kd(args, config: RunConfig, client: ServiceClient) -> int:
    payload = {
        "manifest_path": _abs(args.manifest),
        "d": args.d,
        "reduction": config.reduction,
        "bins": args.bins,
        "hist_lo": args.lo,
        "hist_hi": args.hi,
        "threshold": args.threshold,
    }
    status, body = client.request("POST", "/kd", payload)

    def render(b: dict) -> None:
        for level in b["levels"]:
            print(
                f"level {level['index']}: loss={level['loss']:.6g} "
                f"d={level['d']} c_in={level['c_in']} c_out={level['c_out']}"
            )
        print(f"total ({b['reduction']}): {b['total']:.6g}")
        print(f"fraction of |w| < {b['threshold']}: {b['near_zero_fraction']:.4f}")

    return _finish(status, body, args, render)


def cmd_bench(args, config: RunConfig, client: ServiceClient) -> int:
    if args.batch:
        payload = {
            "input_dir": _abs(args.batch),
            "workers": args.workers if args.workers is not None else config.threads,
            "baseline_workers": args.baseline_workers,
            "warmup": args.warmup,
            "window": config.window,
            "k1": config.k1,
            "k2": config.k2,
        }
        status, body = client.request("POST", "/bench/batch", payload)

        def render(b: dict) -> None:
            print(f"pairs: {b['n_pairs']}")
            print(f"{b['baseline_workers']} worker(s): {b['baseline_seconds']:.3f} s")
            print(f"{b['workers']} worker(s): {b['seconds']:.3f} s")
            print(f"throughput: {b['pairs_per_second']:.2f} pairs/s")
            print(f"speedup: {b['speedup']:.2f}x")

        return _finish(status, body, args, render)
    payload = {
        "rgb_path": _abs(args.rgb),
        "thermal_path": _abs(args.thermal),
        "iterations": args.iterations,
        "warmup": args.warmup,
        "include_io": args.include_io,
        "window": config.window,
        "k1": config.k1,
        "k2": config.k2,
    }
    status, body = client.request("POST", "/bench", payload)

    def render(b: dict) -> None:
        print(f"size: {b['width']}x{b['height']}  iterations: {b['iterations']} "
              f"(+{b['warmup']} warmup)  include_io: {b['include_io']}")
        print(f"min: {b['min_ms']:.2f} ms  median: {b['median_ms']:.2f} ms  "
              f"p95: {b['p95_ms']:.2f} ms")
        for name, ms in b["stage_median_ms"].items():
            print(f"{name:>10}: {ms:8.2f} ms")
        print(f"pixels/second: {b['pixels_per_second']:.3e}")

    return _finish(status, body, args, render)


def cmd_stats(args, config: RunConfig, client: ServiceClient) -> int:
    payload = {
        "weights_path": _abs(args.weights),
        "bins": args.bins,
        "hist_lo": args.lo,
        "hist_hi": args.hi,
        "threshold": args.threshold,
    }
    status, body = client.request("POST", "/stats", payload)

    def render(b: dict) -> None:
        print(f"head: {b['c_out']} x {b['c_in']} ({b['c_out'] * b['c_in']} weights)")
        print(f"fraction of |w| < {b['threshold']}: {b['near_zero_fraction']:.4f}")
        counts = b["counts"]
        edges = b["edges"]
        peak = max(counts) if counts else 0
        for i, count in enumerate(counts):
            bar = "#" * (round(40 * count / peak) if peak else 0)
            print(f"[{edges[i]:+.3f}, {edges[i + 1]:+.3f}): {count:6d} {bar}")

    return _finish(status, body, args, render)


def cmd_serve(args, config: RunConfig, client: ServiceClient | None) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="shapefuse", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="print machine-readable JSON")
    common.add_argument("--config", metavar="TOML", help="config file (flags override it)")
    common.add_argument("--server", metavar="URL", help="use a running service instead of in-process")
    common.add_argument("--window", type=int, help="stats window side (odd, default 7)")
    common.add_argument("--k1", type=float, help="stability constant k1 (default 0.01)")
    common.add_argument("--k2", type=float, help="stability constant k2 (default 0.03)")
    common.add_argument("--lambda", dest="lam", type=float,
                        help="soft-target balance in [0,1] (default 0.1)")
    common.add_argument("--crop-size", type=int, help="crop side (default 224)")
    common.add_argument("--stride", type=int, help="crop stride (default 112)")
    common.add_argument("--threads", type=int,
                        help=f"worker count (default: cores; env {THREADS_ENV_VAR} overrides)")
    common.add_argument("--reduction", choices=("sum", "mean"), help="KD loss reduction")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fuse", parents=[common], help="gate an image pair and export tensors")
    p.add_argument("rgb", nargs="?", help="RGB image path")
    p.add_argument("thermal", nargs="?", help="thermal image path")
    p.add_argument("-o", "--out-dir", default=".", help="output directory")
    p.add_argument("--png", action="store_true", help="also write 8-bit mask previews")
    p.add_argument("--batch", metavar="DIR", help="process DIR/rgb/* with DIR/thermal/*")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("targets", parents=[common], help="build weak-supervision targets")
    p.add_argument("annotations", help="annotation JSON path")
    p.add_argument("-c", "--classes", type=int, required=True, help="class count")
    p.add_argument("-o", "--out-dir", default=".", help="output directory")
    p.add_argument("--crop-probs", metavar="TENSOR",
                   help="per-crop probabilities (n_crops, classes); adds q_hat and q_tilde")
    p.set_defaults(func=cmd_targets)

    p = sub.add_parser("kd", parents=[common], help="evaluate core feature distillation")
    p.add_argument("manifest", help="manifest JSON with per-level x_s/x_t/w_t paths")
    p.add_argument("--d", type=int, help="channels to sample (default: student channel count)")
    p.add_argument("--bins", type=int, default=50, help="histogram bins")
    p.add_argument("--lo", type=float, default=-1.0, help="histogram lower edge")
    p.add_argument("--hi", type=float, default=1.0, help="histogram upper edge")
    p.add_argument("--threshold", type=float, default=0.01, help="near-zero threshold")
    p.set_defaults(func=cmd_kd)

    p = sub.add_parser("bench", parents=[common], help="benchmark the fusion pipeline")
    p.add_argument("rgb", nargs="?", help="RGB image path")
    p.add_argument("thermal", nargs="?", help="thermal image path")
    p.add_argument("-n", "--iterations", type=int, default=20, help="timed iterations")
    p.add_argument("--warmup", type=int, default=1, help="excluded warmup iterations")
    p.add_argument("--include-io", action="store_true", help="include image decode in timings")
    p.add_argument("--batch", metavar="DIR", help="batch throughput over DIR/rgb + DIR/thermal")
    p.add_argument("--workers", type=int, help="pool size for --batch (default: threads)")
    p.add_argument("--baseline-workers", type=int, default=1, help="baseline pool size")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", parents=[common], help="teacher head weight histogram")
    p.add_argument("weights", help="head weight tensor (C_out, C_in)")
    p.add_argument("--bins", type=int, default=50, help="histogram bins")
    p.add_argument("--lo", type=float, default=-1.0, help="histogram lower edge")
    p.add_argument("--hi", type=float, default=1.0, help="histogram upper edge")
    p.add_argument("--threshold", type=float, default=0.01, help="near-zero threshold")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("serve", parents=[common], help="run the service under uvicorn")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def _validate_pair_args(parser: _Parser, args) -> None:
    if getattr(args, "batch", None):
        if args.rgb is not None or args.thermal is not None:
            parser.error(f"{args.command}: give either a pair of images or --batch, not both")
    elif args.rgb is None or args.thermal is None:
        parser.error(f"{args.command}: both RGB and thermal paths are required without --batch")


def entrypoint(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("fuse", "bench"):
        _validate_pair_args(parser, args)
    overrides = {
        "window": args.window,
        "k1": args.k1,
        "k2": args.k2,
        "lam": args.lam,
        "crop_size": args.crop_size,
        "stride": args.stride,
        "threads": args.threads,
        "reduction": args.reduction,
    }
    try:
        config = resolve_config(args.config, overrides)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        client = None if args.command == "serve" else ServiceClient(args.server)
        return args.func(args, config, client)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except httpx.HTTPError as exc:
        print(f"error: request failed: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(entrypoint())


if __name__ == "__main__":
    main()
