"""Command-line entry points: serve, eval, bench, dataset, bridge."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import UsarError
from .evalbench import (bench_latency, eval_measurements, eval_segmentation,
                        load_eval_dataset, phantom_eval_samples, write_dataset)
from .providers import (LatencyModel, PhantomSpec, parse_provider_spec,
                        phantom_next)
from .server import ServerConfig, StreamServer


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, _, h = text.lower().partition("x")
        return int(w), int(h)
    except ValueError as exc:
        raise UsarError(f"size must be WxH, got {text!r}") from exc


def _add_serve(subparsers) -> None:
    p = subparsers.add_parser("serve", help="run the streaming server")
    p.add_argument("--source", default="phantom",
                   help="phantom or replay:<dir>")
    p.add_argument("--provider", default="oracle",
                   help="oracle, oracle:erode=<r> or bridge:<host:port>")
    p.add_argument("--latency-profile", default="0,0",
                   help="simulated inference delay as mean,std ms")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--udp-port", type=int, default=9750)
    p.add_argument("--ws-port", type=int, default=9751)
    p.add_argument("--pixel-spacing", type=float, default=None,
                   help="mm per pixel (default: source's own)")
    p.add_argument("--size", default="512x512", help="phantom frame size WxH")
    p.add_argument("--artifact", default="none",
                   choices=["none", "mild", "severe"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--config", default=None,
                   help="key=value file overriding the flags")
    p.add_argument("--log", default=None, help="event log path")
    p.add_argument("--page", default=None,
                   help="HTML file served to plain GET requests on the ws port")


def _run_serve(args) -> int:
    width, height = _parse_size(args.size)
    config = ServerConfig(source=args.source, provider=args.provider,
                          latency_profile=args.latency_profile, fps=args.fps,
                          host=args.host, udp_port=args.udp_port,
                          ws_port=args.ws_port,
                          pixel_spacing=args.pixel_spacing,
                          width=width, height=height, artifact=args.artifact,
                          seed=args.seed, log_path=args.log,
                          max_frames=args.max_frames, page_path=args.page)
    if args.config:
        config = config.apply_file(args.config)
    server = StreamServer(config)
    server.start()
    print(f"serving: udp {config.host}:{server.udp_port}, "
          f"ws {config.host}:{server.ws_port}", flush=True)
    try:
        while not server._stop.wait(0.5):
            pass
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def _add_eval(subparsers) -> None:
    p = subparsers.add_parser("eval", help="score a provider on a dataset")
    p.add_argument("mode", choices=["seg", "measure"])
    p.add_argument("--dataset", required=True, help="replay directory")
    p.add_argument("--provider", default="oracle")
    p.add_argument("--latency-profile", default="0,0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write key=value report here")


def _run_eval(args) -> int:
    provider = parse_provider_spec(args.provider,
                                   LatencyModel.parse(args.latency_profile),
                                   args.seed)
    dataset = load_eval_dataset(args.dataset)
    if args.mode == "seg":
        report = eval_segmentation(dataset, provider)
    else:
        report = eval_measurements(dataset, provider)
    print(report.format())
    if args.out:
        Path(args.out).write_text(report.to_kv() + "\n")
    provider.close()
    return 0


def _add_bench(subparsers) -> None:
    p = subparsers.add_parser("bench", help="loopback latency bench")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--size", default="512x512")
    p.add_argument("--duration", type=float, default=5.0)
    p.add_argument("--latency-profile", default="0,0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write key=value report here")


def _run_bench(args) -> int:
    width, height = _parse_size(args.size)
    report = bench_latency(fps=args.fps, width=width, height=height,
                           duration_s=args.duration,
                           latency=LatencyModel.parse(args.latency_profile),
                           seed=args.seed)
    print(report.format())
    if args.out:
        Path(args.out).write_text(report.to_kv() + "\n")
    return 0


def _add_dataset(subparsers) -> None:
    p = subparsers.add_parser("dataset",
                              help="materialize a phantom replay dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--coronal", type=int, default=50)
    p.add_argument("--transverse", type=int, default=50)
    p.add_argument("--pixel-spacing", type=float, default=0.5)
    p.add_argument("--artifact", default="none",
                   choices=["none", "mild", "severe"])
    p.add_argument("--seed", type=int, default=0)


def _run_dataset(args) -> int:
    samples = phantom_eval_samples(args.coronal, args.transverse,
                                   args.pixel_spacing, args.seed,
                                   args.artifact)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _add_bridge(subparsers) -> None:
    p = subparsers.add_parser(
        "bridge", help="reference external segmentation bridge")
    p.add_argument("--listen", required=True, help="host:port to listen on")
    p.add_argument("--echo", action="store_true",
                   help="reply with all-background masks instead of phantom truth")
    p.add_argument("--size", default="512x512")
    p.add_argument("--artifact", default="none",
                   choices=["none", "mild", "severe"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--connections", type=int, default=0,
                   help="stop after this many connections (0 = forever)")


def _run_bridge(args) -> int:
    import numpy as np

    from .bridge import run_bridge
    host, _, port = args.listen.rpartition(":")
    if not host or not port:
        raise UsarError(f"--listen must be host:port, got {args.listen!r}")
    if args.echo:
        def segment_fn(image, frame_id):
            return np.zeros_like(image)
    else:
        width, height = _parse_size(args.size)
        spec = PhantomSpec(width=width, height=height, artifact=args.artifact,
                           seed=args.seed)

        def segment_fn(image, frame_id):
            # The phantom is deterministic, so the truth for any frame_id
            # can be regenerated here without sharing state with the server.
            return phantom_next(spec, frame_id)[1].labels
    run_bridge(host, int(port), segment_fn,
               connections=args.connections or None,
               on_bound=lambda p: print(f"bridge listening on {host}:{p}",
                                        flush=True))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="usar",
        description="Real-time ultrasound streaming and kidney measurement")
    subparsers = parser.add_subparsers(dest="command", required=True)
    _add_serve(subparsers)
    _add_eval(subparsers)
    _add_bench(subparsers)
    _add_dataset(subparsers)
    _add_bridge(subparsers)
    args = parser.parse_args(argv)
    runners = {"serve": _run_serve, "eval": _run_eval, "bench": _run_bench,
               "dataset": _run_dataset, "bridge": _run_bridge}
    try:
        return runners[args.command](args)
    except UsarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
