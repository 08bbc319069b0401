import hashlib
import os

from _events import log, loop

with open("model.pth", "rb") as f:
    weights = f.read()
log("model_digest", hashlib.sha256(weights).hexdigest()[:12])

COLORS = ["green", "red"]
for doc_name in loop("document", sorted(os.listdir("pages"))):
    N = len(os.listdir(os.path.join("pages", doc_name)))
    for page in loop("page", range(N)):
        with open(os.path.join("pages", doc_name, f"{page}.txt"), encoding="utf-8") as f:
            text = f.read()
        log("predicted_color", COLORS[(len(text) + len(weights)) % 2])
