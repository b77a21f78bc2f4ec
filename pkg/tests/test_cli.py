import csv
import json
import struct
import zlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inrsteg import checkpoint as ckpt_io
from inrsteg import payload as framing
from inrsteg.cli import main
from inrsteg.fnns import DecoderSpec
from inrsteg.fungen import GaspConfig, GaspState, two_blob_images
from inrsteg.imageio import read_pixels, write_pixels
from inrsteg.inr import InrArch, quantize

DATA = Path(__file__).parent / "data"
SMALL = InrArch(n_freq=8, hidden=16)


@pytest.fixture(scope="module")
def small_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "g.ginr"
    state = GaspState.create(SMALL, GaspConfig(batch=4, disc_hidden=8, latent=64), seed=1)
    ckpt_io.save(path, ckpt_io.from_state(state, seed=1))
    return path


# -- checkpoint ---------------------------------------------------------------

def test_checkpoint_round_trip_is_byte_identical(small_ckpt, tmp_path):
    first = small_ckpt.read_bytes()
    ck = ckpt_io.load(small_ckpt)
    assert ck.arch == SMALL and ck.meta["seed"] == 1
    assert ckpt_io.save(tmp_path / "again.ginr", ck) == first
    assert ckpt_io.crc_of(small_ckpt) == zlib.crc32(first[:-4])
    assert ckpt_io.config_of(ck).latent == 64


def test_checkpoint_corruption_detected(small_ckpt):
    blob = bytearray(small_ckpt.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.loads(bytes(blob))
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.loads(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.loads(bytes(blob[:10]))


# -- payload framing -------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.binary(max_size=56), st.integers(0, 2**32 - 1))
def test_frame_round_trip(data, pad_seed):
    bits = framing.encode(data, 16, 16, 2, pad_seed=pad_seed)
    assert bits.shape == (16, 16, 2)
    assert framing.decode(bits) == data


def test_frame_layout_is_msb_first_row_major():
    bits = framing.encode(b"\x80", 8, 8, 2)
    flat = bits.reshape(-1)
    assert flat[:32].tolist() == [0] * 31 + [1]  # length 1, big-endian
    assert flat[32:40].tolist() == [1, 0, 0, 0, 0, 0, 0, 0]
    assert bits[0, 0].tolist() == [0, 0] and bits[4, 0].tolist() == [1, 0]
    crc = struct.unpack(">I", np.packbits(flat[40:72]).tobytes())[0]
    assert crc == zlib.crc32(b"\x80")


def test_frame_capacity_and_damage():
    assert framing.max_payload_bytes(64, 64, 1) == 512 - 8
    with pytest.raises(framing.CapacityError):
        framing.encode(bytes(57), 16, 16, 2)
    bits = framing.encode(b"hello", 16, 16, 2)
    bits.reshape(-1)[40] ^= 1
    with pytest.raises(framing.ChecksumError):
        framing.decode(bits)


# -- sample -------------------------------------------------------------------

@pytest.mark.parametrize("size", ["64x64", "128x128", "1x1"])
def test_sample_sizes_and_repeatability(small_ckpt, tmp_path, size):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    assert main(["sample", "--ckpt", str(small_ckpt), "--seed", "3", "--size", size, "--out", str(a)]) == 0
    assert main(["sample", "--ckpt", str(small_ckpt), "--seed", "3", "--size", size, "--out", str(b)]) == 0
    h, w = (int(v) for v in size.split("x"))
    assert read_pixels(a).shape == (h, w, 3)
    assert a.read_bytes() == b.read_bytes()


def test_sample_rejects_bad_size_and_missing_ckpt(small_ckpt, tmp_path):
    assert main(["sample", "--ckpt", str(small_ckpt), "--seed", "0", "--size", "0x4",
                 "--out", str(tmp_path / "x.png")]) == 2
    assert main(["sample", "--ckpt", str(tmp_path / "nope"), "--seed", "0",
                 "--out", str(tmp_path / "x.png")]) == 1


# -- hide / reveal --------------------------------------------------------------

@pytest.fixture
def cover_png(tmp_path):
    from inrsteg.imageio import read_image
    px = quantize(read_image(DATA / "coffee_32.png")[::2, ::2])
    path = tmp_path / "cover.png"
    write_pixels(path, px)
    return path


def test_oversize_payload_exits_2_without_output(cover_png, tmp_path):
    big = tmp_path / "big.bin"
    big.write_bytes(bytes(framing.max_payload_bytes(16, 16, 1) + 1))
    out = tmp_path / "stego.png"
    code = main(["hide", "--cover", str(cover_png), "--payload", str(big), "--out", str(out)])
    assert code == 2 and not out.exists() and not out.with_suffix(".spec").exists()


@pytest.fixture
def hidden(cover_png, tmp_path):
    msg = tmp_path / "msg.bin"
    msg.write_bytes(b"attack at dawn")
    out = tmp_path / "stego.png"
    report = tmp_path / "r.json"
    code = main(["hide", "--cover", str(cover_png), "--payload", str(msg), "--bpp", "1",
                 "--rounds", "30", "--out", str(out), "--report", str(report)])
    assert code == 0
    return msg, out, json.loads(report.read_text())


def test_hide_reveal_round_trip(hidden, tmp_path):
    msg, out, rep = hidden
    assert rep["ber"] == 0.0 and rep["early_stopped"]
    assert set(rep) >= {"ber", "psnr", "ssim", "seed_used", "t_gen_s", "t_hide_s"}
    got = tmp_path / "got.bin"
    assert main(["reveal", "--stego", str(out), "--decoder-spec", str(out.with_suffix(".spec")),
                 "--out", str(got)]) == 0
    assert got.read_bytes() == msg.read_bytes()


def test_wrong_seed_fails_checksum(hidden, tmp_path):
    msg, out, _ = hidden
    spec = DecoderSpec.from_text(out.with_suffix(".spec").read_text())
    bad = tmp_path / "bad.spec"
    bad.write_text(DecoderSpec(spec.seed + 1, spec.height, spec.width, spec.bpp).to_text())
    got = tmp_path / "raw.bin"
    assert main(["reveal", "--stego", str(out), "--decoder-spec", str(bad), "--out", str(got)]) == 1
    assert len(got.read_bytes()) == 16 * 16 // 8


def test_reveal_rejects_mismatched_spec(hidden, tmp_path):
    _, out, _ = hidden
    bad = tmp_path / "bad.spec"
    bad.write_text(DecoderSpec(1, 8, 8, 1).to_text())
    assert main(["reveal", "--stego", str(out), "--decoder-spec", str(bad),
                 "--out", str(tmp_path / "o")]) == 2


def test_hide_from_checkpoint_with_random_bits(small_ckpt, tmp_path):
    out = tmp_path / "s.png"
    code = main(["hide", "--ckpt", str(small_ckpt), "--cover-seed", "2", "--size", "16x16",
                 "--random-bits", "--bpp", "2", "--rounds", "2", "--out", str(out)])
    assert code == 0
    assert read_pixels(out).shape == (16, 16, 3)
    assert DecoderSpec.from_text(out.with_suffix(".spec").read_text()).bpp == 2


def test_metrics_and_ber_commands(cover_png, tmp_path, capsys):
    assert main(["metrics", str(cover_png), str(cover_png)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["mse"] == 0.0 and out["psnr"] is None
    a, b = tmp_path / "a", tmp_path / "b"
    a.write_bytes(b"\x00\x00")
    b.write_bytes(b"\x00\x03")
    assert main(["ber", str(a), str(b)]) == 0
    assert capsys.readouterr().out.strip() == "0.125000"


# -- bench / train ----------------------------------------------------------------

def test_bench_csv_shape(small_ckpt, tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--ckpt", str(small_ckpt), "--trials", "2", "--bpps", "1,2",
                 "--size", "16x16", "--rounds", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 2 * 2 + 2
    assert [r["trial"] for r in rows[-2:]] == ["mean", "mean"]
    assert all(r["failure"] == "" for r in rows)
    assert set(rows[0]) == {"trial", "bpp", "ber", "psnr", "ssim", "gen_time_s",
                            "hide_time_s", "seed_used", "failure"}


def test_train_gasp_cli(tmp_path):
    data = tmp_path / "imgs"
    data.mkdir()
    for i, img in enumerate(two_blob_images(4, size=8, seed=0)):
        write_pixels(data / f"{i}.png", quantize(img))
    out = tmp_path / "g.ginr"
    assert main(["train-gasp", "--data", str(data), "--out", str(out), "--steps", "2",
                 "--batch", "2", "--seed", "4"]) == 0
    rows = list(csv.DictReader(out.with_suffix(".csv").open()))
    assert [r["step"] for r in rows] == ["1", "2"]
    assert ckpt_io.load(out).meta["step"] == 2
    assert main(["train-gasp", "--data", str(tmp_path / "none"), "--out", str(out)]) == 2
