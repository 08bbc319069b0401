import os

from _events import log

# stand-in for the review web app: feedback is recorded with `flor feedback`
pages = sum(len(os.listdir(os.path.join("pages", d))) for d in os.listdir("pages"))
print(f"Serving predictions for {pages} pages; record reviews with `flor feedback`.")
log("pages_served", pages)
