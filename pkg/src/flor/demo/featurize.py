import os
import re

from _events import log, loop


def read_page(doc_name, page):
    with open(os.path.join("pages", doc_name, f"{page}.txt"), encoding="utf-8") as f:
        text = f.read()
    if text.startswith("[scan]"):
        return "OCR", text[len("[scan]"):].strip()
    return "TXT", text.strip()


def analyze_text(page_text):
    headings = [line.lstrip("#").strip() for line in page_text.splitlines() if line.startswith("#")]
    page_numbers = re.findall(r"\bpage (\d+)\b", page_text)
    return headings, page_numbers


for doc_name in loop("document", sorted(os.listdir("pages"))):
    N = len(os.listdir(os.path.join("pages", doc_name)))
    for page in loop("page", range(N)):
        # text_src is "OCR" or "TXT"
        text_src, page_text = read_page(doc_name, page)
        log("text_src", text_src)
        log("page_text", page_text)

        headings, page_numbers = analyze_text(page_text)
        log("headings", headings)
        log("page_numbers", page_numbers)
