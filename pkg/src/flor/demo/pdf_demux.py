import os

from _events import log, loop

docs = sorted(f for f in os.listdir(".") if f.endswith(".pdf"))
for doc_name in loop("document", docs):
    with open(doc_name, encoding="utf-8") as f:
        pages = f.read().split("\f")
    os.makedirs(os.path.join("pages", doc_name), exist_ok=True)
    for page in loop("page", range(len(pages))):
        with open(os.path.join("pages", doc_name, f"{page}.txt"), "w", encoding="utf-8") as out:
            out.write(pages[page])
        log("first_page", int(page == 0))
