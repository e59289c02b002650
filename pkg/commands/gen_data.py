from dataio import dataset_size_bytes, generate_orbit_dataset
from run_config import DEFAULT_SETTINGS


class GenDataCommand:
    """Render a synthetic orbit dataset in the multi-view directory layout"""

    name = "gen-data"
    help = "generate a synthetic orbit-video dataset"

    def setup_parser(self, parser):
        parser.add_argument("--scenes", type=int, default=8, help="number of orbit sequences")
        parser.add_argument("--views", type=int, default=16, help="frames per orbit")
        parser.add_argument("--size", type=int, default=DEFAULT_SETTINGS["image_size"],
                            help="square image size in pixels")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--arc", type=float, default=120.0, help="orbit span in degrees")
        parser.add_argument("--out", required=True, help="dataset root to write")

    def run(self, args):
        manifests = generate_orbit_dataset(args.scenes, args.views, args.size, args.seed, args.out,
                                           arc_degrees=args.arc)
        frames = sum(m.frame_count for m in manifests)
        print(f"[gen-data] Wrote {len(manifests)} scenes, {frames} frames, "
              f"{dataset_size_bytes(args.out)} bytes to {args.out}")
        return 0
