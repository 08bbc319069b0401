from _events import log, loop

for doc in loop("document", ["a.pdf", "b.pdf"]):
    log("n_pages", 2)
