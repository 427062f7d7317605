import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from birdsr.cli import main, read_dir
from birdsr.formats import (
    FormatError,
    decode_checkpoint,
    decode_image,
    decode_tensor,
    encode_checkpoint,
    encode_image,
    encode_tensor,
    image_grid,
    load_checkpoint,
    parse_config_text,
    read_csv,
    read_image,
    save_checkpoint,
    write_csv,
    write_image,
)

# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------


def test_pgm_worked_example():
    buf = b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64])
    img = decode_image(buf)
    assert img.shape == (1, 2, 2) and img.dtype == np.float32
    np.testing.assert_allclose(img[0], [[0.0, 128 / 255], [1.0, 64 / 255]])
    assert encode_image(img) == buf


def test_header_comments_and_ppm():
    buf = b"P6 # colour\n1 1 # one pixel\n255\n" + bytes([10, 20, 30])
    img = decode_image(buf)
    assert img.shape == (3, 1, 1)
    np.testing.assert_allclose(img[:, 0, 0], np.array([10, 20, 30]) / 255)


@pytest.mark.parametrize(
    "buf",
    [
        b"P7\n2 2\n255\n" + bytes(4),
        b"P5\n2 2\n255\n" + bytes(3),
        b"P5\n2 2\n65535\n" + bytes(8),
        b"P5\n2",
        b"P5\nx 2\n255\n" + bytes(4),
    ],
)
def test_malformed_images(buf):
    with pytest.raises(FormatError):
        decode_image(buf)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.sampled_from([1, 3]), st.integers(1, 6), st.integers(1, 6)), elements=st.floats(0, 1, width=32)))
def test_image_round_trip_within_one_level(img):
    back = decode_image(encode_image(img))
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 1 / 255


def test_image_file_and_grid(tmp_path):
    img = np.random.default_rng(0).random((1, 5, 7)).astype(np.float32)
    write_image(tmp_path / "x.pgm", img)
    assert np.max(np.abs(read_image(tmp_path / "x.pgm") - img)) <= 1 / 255
    grid = image_grid([img, img, img], cols=2, pad=1)
    assert grid.shape == (1, 2 * 6 + 1, 2 * 8 + 1)
    with pytest.raises(ValueError):
        encode_image(np.zeros((2, 3, 3)))


# --------------------------------------------------------------------------
# tensors and checkpoints
# --------------------------------------------------------------------------


def test_tensor_round_trip_and_errors():
    a = np.random.default_rng(1).standard_normal((2, 3, 4)).astype(np.float32)
    buf = encode_tensor(a)
    assert buf[:4] == b"BFT1" and struct.unpack_from("<I", buf, 4)[0] == 3
    np.testing.assert_array_equal(decode_tensor(buf), a)
    with pytest.raises(FormatError):
        decode_tensor(buf[:-1])
    with pytest.raises(FormatError):
        decode_tensor(b"XXXX" + buf[4:])


def _entries():
    rng = np.random.default_rng(2)
    return {"param.w": rng.standard_normal((3, 2)).astype(np.float32), "adam.step": np.array([7.0], np.float32)}


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    save_checkpoint(tmp_path / "a.bird", _entries())
    loaded = load_checkpoint(tmp_path / "a.bird")
    assert list(loaded) == ["param.w", "adam.step"]
    np.testing.assert_array_equal(loaded["param.w"], _entries()["param.w"])
    save_checkpoint(tmp_path / "b.bird", loaded)
    assert (tmp_path / "a.bird").read_bytes() == (tmp_path / "b.bird").read_bytes()


def test_checkpoint_corruption_is_detected():
    buf = bytearray(encode_checkpoint(_entries()))
    for pos in (5, 20, len(buf) - 10):
        bad = bytearray(buf)
        bad[pos] ^= 0x01
        with pytest.raises(FormatError, match="CRC"):
            decode_checkpoint(bytes(bad))
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOPE" + bytes(buf[4:]))
    with pytest.raises(FormatError):
        decode_checkpoint(bytes(buf[:10]))


def test_checkpoint_version_mismatch():
    body = bytearray(encode_checkpoint(_entries())[:-4])
    body[4:8] = struct.pack("<I", 99)
    buf = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with pytest.raises(FormatError, match="version"):
        decode_checkpoint(buf)


# --------------------------------------------------------------------------
# configs and CSV
# --------------------------------------------------------------------------


def test_parse_config_text():
    text = "# comment\niterations = 10\n\ngamma=0.1  # trailing\nvariant = mixed\n"
    assert parse_config_text(text) == {"iterations": "10", "gamma": "0.1", "variant": "mixed"}
    with pytest.raises(FormatError):
        parse_config_text("no equals sign")
    with pytest.raises(FormatError):
        parse_config_text(" = 3")


def test_csv_round_trip(tmp_path):
    write_csv(tmp_path / "x.csv", [{"a": 1, "b": 0.1}, {"a": 2}], ["a", "b"])
    rows = read_csv(tmp_path / "x.csv")
    assert rows == [{"a": "1", "b": "0.1"}, {"a": "2", "b": ""}]


# --------------------------------------------------------------------------
# CLI end to end
# --------------------------------------------------------------------------

TINY_CFG = """\
iterations = 3
T = 4
batch_k = 2
hidden_width = 4
hr_size = 16
n_train_a = 4
n_train_b = 4
n_eval = 3
pretrain_iters = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


def test_cli_data_pipeline(tmp_path, capsys):
    hr = tmp_path / "hr"
    assert main(["gen-data", "--out", str(hr), "--n", "6", "--size", "16", "--seed", "1"]) == 0
    names, imgs = read_dir(hr)
    assert names == [f"img_{i:04d}" for i in range(6)] and imgs[0].shape == (1, 16, 16)
    assert len(list(hr.glob("*.pgm"))) == 6 and len(list(hr.glob("*.ft"))) == 6
    for fam in ("a", "b"):
        assert main(["degrade", "--family", fam, "--in", str(hr), "--out", str(tmp_path / fam)]) == 0
    _, lr = read_dir(tmp_path / "a")
    assert lr[0].shape == (1, 4, 4)
    out = tmp_path / "an"
    assert main(["analyze", "--corpus-a", str(tmp_path / "a"), "--corpus-b", str(tmp_path / "b"), "--hr", str(hr), "--out", str(out)]) == 0
    for name in ("lbp_histograms.csv", "band_cosine.csv", "kde_curves.csv", "pca_points.csv", "summary.json"):
        assert (out / name).exists()
    assert "lbp_inter_l1" in capsys.readouterr().out


def test_cli_train_eval_sample(tmp_path, tiny_config, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--out", str(run), "--variant", "forward_only", "--checkpoint-every", "1"]) == 0
    for name in ("final.bird", "manifest.json", "runlog.csv", "eval.csv", "ckpt_000002.bird"):
        assert (run / name).exists()
    assert "forward_only" in capsys.readouterr().out
    rows = read_csv(run / "eval.csv")
    assert len(rows) == 3

    out_csv = tmp_path / "eval.csv"
    assert main(["eval", "--checkpoint", str(run / "final.bird"), "--out", str(out_csv)]) == 0
    assert [r["psnr"] for r in read_csv(out_csv)] == [r["psnr"] for r in rows]

    assert main(["gen-data", "--out", str(tmp_path / "hr"), "--n", "2", "--size", "16"]) == 0
    assert main(["degrade", "--family", "b", "--in", str(tmp_path / "hr"), "--out", str(tmp_path / "lr")]) == 0
    sr = tmp_path / "sr"
    assert main(["sample", "--checkpoint", str(run / "final.bird"), "--lr-dir", str(tmp_path / "lr"), "--out", str(sr), "--trace"]) == 0
    names, imgs = read_dir(sr)
    assert names == ["img_0000_sr", "img_0001_sr"] and imgs[0].shape == (1, 16, 16)
    assert (sr / "trace" / "img_0000.pgm").exists()


def test_cli_resume(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(tiny_config), "--out", str(a), "--checkpoint-every", "1"]) == 0
    assert main(["train", "--config", str(tiny_config), "--out", str(b), "--resume", str(a / "ckpt_000001.bird")]) == 0
    assert (a / "final.bird").read_bytes() == (b / "final.bird").read_bytes()


def test_cli_eval_fresh_init_has_one_row_per_image(tmp_path, tiny_config):
    out = tmp_path / "e.csv"
    assert main(["eval", "--config", str(tiny_config), "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 3 and list(rows[0]) == ["label", "index", "psnr", "ssim", "struct_loss", "reward"]


def test_cli_usage_and_runtime_errors(tmp_path, tiny_config, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--out", str(tmp_path), "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    assert main(["degrade", "--family", "a", "--in", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("not_a_key = 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
    corrupt = tmp_path / "c.bird"
    corrupt.write_bytes(b"BIRD" + bytes(20))
    assert main(["eval", "--checkpoint", str(corrupt), "--config", str(tiny_config), "--out", str(tmp_path / "x.csv")]) == 1
    assert main(["eval", "--config", str(tiny_config), "--hr-dir", str(tmp_path), "--out", str(tmp_path / "y.csv")]) == 1
