"""Smoke test of the neurovox extension module.

Run `python/build.sh` first, then `python3 python/smoke_test.py`.
"""

import os
import sys
import tempfile

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import neurovox as nv  # noqa: E402


def main():
    rec = nv.synthesize_recording(duration_s=200.0, n_channels=4, snr_db=10.0, seed=3)
    assert rec.n_channels == 4
    assert abs(rec.duration_s - 200.0) < 1e-3
    assert rec.neural.shape[0] == 4 and rec.audio.dtype == np.int16
    print(rec)

    with tempfile.TemporaryDirectory() as d:
        manifest = rec.save(d)
        again = nv.Recording.load(manifest)
        assert np.array_equal(again.neural, rec.neural)
        assert np.array_equal(again.audio, rec.audio)

    feats = nv.extract_features(rec)
    assert feats.shape[0] == 4 and np.isfinite(feats).all()

    audio = rec.audio.astype(np.float32) / 32768.0
    mel = nv.mel_spectrogram(audio, rec.fs_audio)
    assert mel.shape[0] == 80
    wav = nv.griffin_lim(mel[:, :200], iterations=4)
    assert abs(len(wav) - 200 * 275.625) < 300

    mean_r, per_bin = nv.pearson_per_bin(mel, mel)
    assert abs(mean_r - 1.0) < 1e-9 and len(per_bin) == 80
    assert nv.mse(mel, mel) == 0.0

    t = nv.welch_t_test([1, 2, 3, 4, 5], [2, 4, 6, 8, 10])
    assert abs(t["p"] - 0.10753) < 1e-4
    t = nv.paired_t_test([1.1, 2.3, 3.2, 4.4], [1.0, 2.0, 3.0, 4.0])
    assert t["t"] > 0

    mean, thr, above = nv.listening_chance_sim(20, 0.9, reps=2000, seed=1)
    assert abs(mean - 0.5) < 0.02 and 0.5 < thr < 0.6 and above

    stat, p, ch, per_ch = nv.contamination_test(rec, n_permutations=100, seed=2)
    assert 0.0 < p <= 1.0 and len(per_ch) == 4 and 0 <= ch < 4

    rows, cols = nv.fold_channels(110)
    assert rows * cols >= 110
    assert nv.count_params("seq2seq", 110, "paper") == 10_006_539
    assert nv.count_params("densenet", 110, "paper") == 98_702

    out = nv.train_and_evaluate(rec, arch="densenet", seed=1, epochs=1)
    assert out["prediction"].shape[0] == 80 and out["test_mse"] > 0.0
    print("train_and_evaluate: test r = %.3f, mse = %.3f" % (out["test_r"], out["test_mse"]))

    print("smoke test ok")


if __name__ == "__main__":
    main()
