import subprocess
import sys

# best checkpoint by recall, or the bundled fallback when none was logged
subprocess.run(
    [sys.executable, "-m", "flor", "checkpoint", "recall", "--fallback", "fallback_model.bin", "--out", "model.pth"],
    check=True,
)
