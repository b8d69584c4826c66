from pathlib import Path

import numpy as np
import pytest
from PIL import Image

R_VELO_TO_CAM = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def _fmt(a):
    return " ".join(f"{v:.12e}" for v in np.asarray(a, dtype=np.float64).ravel())


def write_image(path, seed, size=(124, 38)):
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.random.default_rng(seed).integers(0, 256, (size[1], size[0], 3), dtype=np.uint8)
    Image.fromarray(arr).save(path)


@pytest.fixture
def fake_kitti(tmp_path):
    """A tiny raw + odometry tree: one drive of five frames, one odometry sequence.

    Native images are 124 x 38 with fx = 72, c = (61, 18). Laser scans put
    two returns on the principal ray (10 m and 20 m) and one at 5 m off-axis.
    """
    root = tmp_path / "kitti"
    date = root / "2011_09_26"
    date.mkdir(parents=True)
    P = np.array([[72.0, 0, 61.0, 0], [0, 72.0, 18.0, 0], [0, 0, 1, 0]])
    (date / "calib_cam_to_cam.txt").write_text(
        "calib_time: 09-Jan-2012 13:57:47\n"
        f"S_rect_02: {_fmt([124, 38])}\nS_rect_03: {_fmt([124, 38])}\n"
        f"R_rect_00: {_fmt(np.eye(3))}\nP_rect_02: {_fmt(P)}\nP_rect_03: {_fmt(P)}\n"
    )
    (date / "calib_velo_to_cam.txt").write_text(f"R: {_fmt(R_VELO_TO_CAM)}\nT: {_fmt([0, 0, 0])}\n")
    drive = date / "2011_09_26_drive_0001_sync"
    for i in range(5):
        for cam in (2, 3):
            write_image(drive / f"image_0{cam}" / "data" / f"{i:010d}.png", 10 * i + cam)
        scan = np.array([[10.0, 0, 0, 1], [20.0, 0, 0, 1], [5.0, -1.0, 0, 1], [-3.0, 0, 0, 1]], np.float32)
        velo = drive / "velodyne_points" / "data" / f"{i:010d}.bin"
        velo.parent.mkdir(parents=True, exist_ok=True)
        scan.tofile(velo)

    seq = root / "sequences" / "09"
    (seq).mkdir(parents=True)
    (seq / "calib.txt").write_text(f"P0: {_fmt(P)}\nP2: {_fmt(P)}\nP3: {_fmt(P)}\n")
    for i in range(6):
        write_image(seq / "image_2" / f"{i:06d}.png", 100 + i)
    poses = np.tile(np.eye(4), (6, 1, 1))
    poses[:, 2, 3] = np.arange(6) * 1.5
    (root / "poses").mkdir()
    np.savetxt(root / "poses" / "09.txt", poses[:, :3, :].reshape(6, 12))

    splits = root / "splits"
    rel = "2011_09_26/2011_09_26_drive_0001_sync"
    for sub, name, lines in [
        ("eigen_zhou", "train_files.txt", [f"{rel} 1 l", f"{rel} 2 r", f"{rel} 3 l"]),
        ("eigen_zhou", "val_files.txt", [f"{rel} 2 l"]),
        ("eigen", "test_files.txt", [f"{rel} 1 l", f"{rel} 3 l"]),
        ("odom", "train_files.txt", ["9 1 l", "9 2 l", "9 3 l", "9 4 l"]),
    ]:
        (splits / sub).mkdir(parents=True, exist_ok=True)
        (splits / sub / name).write_text("\n".join(lines) + "\n")
    return Path(root)
