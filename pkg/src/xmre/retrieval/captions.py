"""Caption extraction from crawled pages.

Given a page's HTML and the image URL the reverse lookup reported, find the
matching ``<img>`` and return the nearest caption-like text, in priority
order: the enclosing figure's ``<figcaption>``, the image's ``alt``
attribute, then its ``title`` attribute. The URL must match the ``src``
attribute exactly.
"""

from __future__ import annotations

import re
from html.parser import HTMLParser


def _clean(text: str) -> str | None:
    collapsed = re.sub(r"\s+", " ", text).strip()
    return collapsed or None


class _CaptionParser(HTMLParser):
    def __init__(self, image_url: str):
        super().__init__(convert_charrefs=True)
        self.image_url = image_url
        self._figures: list[dict] = []
        self._caption_depth = 0
        self.matched_figures: list[dict] = []
        self.alt: str | None = None
        self.title: str | None = None

    def handle_starttag(self, tag, attrs):
        attrs = dict(attrs)
        if tag == "figure":
            self._figures.append({"matched": False, "caption_parts": []})
        elif tag == "figcaption" and self._figures:
            self._caption_depth += 1
        elif tag == "img" and attrs.get("src") == self.image_url:
            if self._figures:
                self._figures[-1]["matched"] = True
            if self.alt is None:
                self.alt = _clean(attrs.get("alt", ""))
            if self.title is None:
                self.title = _clean(attrs.get("title", ""))

    def handle_startendtag(self, tag, attrs):
        self.handle_starttag(tag, attrs)

    def handle_endtag(self, tag):
        if tag == "figure" and self._figures:
            fig = self._figures.pop()
            if fig["matched"]:
                self.matched_figures.append(fig)
        elif tag == "figcaption" and self._caption_depth:
            self._caption_depth -= 1

    def handle_data(self, data):
        if self._caption_depth and self._figures:
            self._figures[-1]["caption_parts"].append(data)

    def result(self) -> str | None:
        # Unclosed figures still count as enclosing the match.
        for fig in self._figures:
            if fig["matched"]:
                self.matched_figures.append(fig)
        for fig in self.matched_figures:
            caption = _clean("".join(fig["caption_parts"]))
            if caption:
                return caption
        return self.alt or self.title


def extract_caption(html: str, image_url: str) -> str | None:
    """Return the caption for ``image_url`` in ``html``, or None if absent."""

    parser = _CaptionParser(image_url)
    parser.feed(html)
    parser.close()
    return parser.result()
