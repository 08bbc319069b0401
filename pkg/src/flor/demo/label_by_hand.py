import csv
import io
import subprocess
import sys

from _events import log

# labels come from feedback logged by the app; none exist on the first cycle
proc = subprocess.run(
    [sys.executable, "-m", "flor", "query", "first_page", "page_color", "--csv"],
    capture_output=True, text=True,
)
rows = list(csv.DictReader(io.StringIO(proc.stdout))) if proc.returncode == 0 else []
labeled = [r for r in rows if r.get("page_color")]
log("n_labeled", len(labeled))
