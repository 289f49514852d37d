"""Toy corpus to audio: prepare data, train briefly, synthesize and score the vocoder path.

Run with ``python3 demos/toy_pipeline.py [workdir] [steps]``. A few hundred steps
are needed before the audio resembles the corpus; the default is a quick smoke run.
"""

import json
import sys
from pathlib import Path

from moetts import cli


def main(work: Path, steps: int) -> None:
    corpus, run_dir = work / "toy", work / "run"
    cli.main(["make-toy-corpus", str(corpus)])
    cli.main(["prepare-data", str(corpus), "--out", str(corpus / "train.tsv")])
    cli.main(["train", "--manifest", str(corpus / "train.tsv"), "--run-dir", str(run_dir),
              "--max-steps", str(steps), "--checkpoint-every", "50", "--print-every", "10"])

    ckpt = run_dir / "checkpoint.pt"
    cli.main(["synth", "--checkpoint", str(ckpt), "--phonemes", "sil m a s i n o sil",
              "--speaker", "1", "--out", str(work / "synth" / "demo.wav")])
    cli.main(["eval-vocoder", "--audio-dir", str(corpus / "heldout"), "--checkpoint", str(ckpt),
              "--out", str(work / "eval" / "vocoder.json"), "--rtf"])
    report = json.loads((work / "eval" / "vocoder.json").read_text())
    print({k: report[k] for k in ("m_stft", "mcd", "periodicity_error", "vuv_f1", "rtf_cpu")})


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "demo_work"), int(sys.argv[2]) if len(sys.argv) > 2 else 20)
