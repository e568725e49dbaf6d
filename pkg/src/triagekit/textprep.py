"""Text cleaning, tokenization, stoplist construction, key-phrase extraction."""

from __future__ import annotations

import html
import logging
import math
import re
import unicodedata
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

PLACEHOLDERS = ("<num>", "<guid>", "<url>", "<hex>")

# Markup tags are stripped but the placeholder tokens we insert must survive a
# second pass, hence the lookahead excluding them.
_TAG_RE = re.compile(r"</?(?!(?:num|guid|url|hex)>)[a-zA-Z][^<>]*>")
_URL_RE = re.compile(r"\b(?:https?://|www\.)[^\s<>\"']+", re.IGNORECASE)
_GUID_RE = re.compile(
    r"\b[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}\b"
)
# Long hex runs (hash ids, binary dumps); require a digit so ordinary words
# made of a-f letters are not swallowed.
_HEX_RE = re.compile(r"\b(?=[0-9a-fA-F]*[0-9])[0-9a-fA-F]{16,}\b")
# Base64/binary blobs from embedded images: long runs over the base64 alphabet.
_BASE64_RE = re.compile(r"[A-Za-z0-9+/]{64,}={0,2}")
_NUM_RE = re.compile(r"(?<![A-Za-z0-9])\d+(?:[.,]\d+)*(?![A-Za-z0-9])")
_WS_RE = re.compile(r"\s+")

_SENTENCE_SPLIT_RE = re.compile(r"[.!?]+(?=\s|$)|\n+")
_TOKEN_RE = re.compile(r"<(?:num|guid|url|hex)>|[a-z0-9]+")

#: Everyday function words excluded from key-phrase candidates.
STOPWORDS = frozenset("""
a about after all also an and any are as at be because been before being but by
can could did do does down for from had has have he her his how i if in into is
it its just like more most my no not now of on only or other our out over s so
some such t than that the their them then there these they this to under up
very was we were what when where which while who will with would you your
""".split()) | frozenset(PLACEHOLDERS)


def clean_text(raw: str) -> str:
    """Normalize raw incident text to lowercase plain text with placeholders.

    Markup tags are stripped (content kept), base64 blobs dropped, unicode
    NFC-normalized; URLs, GUIDs, long hex runs and standalone numbers become
    the <url>/<guid>/<hex>/<num> placeholder tokens. Idempotent and total.
    """
    if not raw:
        return ""
    text = unicodedata.normalize("NFC", raw)
    prev = None
    while prev != text:
        prev = text
        text = html.unescape(text)
    prev = None
    while prev != text:
        prev = text
        text = _TAG_RE.sub(" ", text)
    text = _BASE64_RE.sub(" ", text)
    text = _URL_RE.sub(" <url> ", text)
    text = _GUID_RE.sub(" <guid> ", text)
    text = _HEX_RE.sub(" <hex> ", text)
    text = _NUM_RE.sub(" <num> ", text)
    text = text.lower()
    return _WS_RE.sub(" ", text).strip()


@dataclass
class TokenStream:
    sentences: list = field(default_factory=list)
    source_field: str = "mixed"

    def tokens(self):
        for sentence in self.sentences:
            yield from sentence

    def token_count(self) -> int:
        return sum(len(s) for s in self.sentences)


def tokenize(cleaned: str, source_field: str = "mixed") -> TokenStream:
    """Split cleaned text into sentences of word tokens.

    Sentence boundaries are ./!/? followed by whitespace (or end of text) and
    newlines; within a sentence, tokens are maximal [a-z0-9] runs, with the
    closed placeholder set preserved as single tokens. Dots without trailing
    whitespace ("a.b.c") do not end a sentence, so the dotted name becomes one
    sentence of its component words.
    """
    sentences = []
    for segment in _SENTENCE_SPLIT_RE.split(cleaned):
        if not segment:
            continue
        tokens = _TOKEN_RE.findall(segment)
        if tokens:
            sentences.append(tokens)
    return TokenStream(sentences=sentences, source_field=source_field)


def incident_text(incident) -> str:
    """Model-visible text: title, summary, and the first three discussion entries."""
    parts = [incident.title, incident.summary]
    parts.extend(incident.discussion[:3])
    return "\n".join(p for p in parts if p)


def incident_token_stream(incident, stoplist=None) -> TokenStream:
    stream = tokenize(clean_text(incident_text(incident)))
    if stoplist:
        stream = remove_noisy_phrases(stream, stoplist)
    return stream


def _as_phrase_tuple(phrase):
    if isinstance(phrase, str):
        return tuple(phrase.split())
    return tuple(phrase)


def normalize_stoplist(stoplist):
    phrases = {_as_phrase_tuple(p) for p in stoplist}
    for p in phrases:
        if not 1 <= len(p) <= 4:
            raise ValueError(f"stoplist phrases must be 1-4 tokens, got {p!r}")
    return phrases


def remove_noisy_phrases(stream: TokenStream, stoplist) -> TokenStream:
    """Delete stoplist phrase matches, greedy leftmost-longest, per sentence."""
    phrases = normalize_stoplist(stoplist)
    if not phrases:
        return TokenStream([list(s) for s in stream.sentences], stream.source_field)
    max_len = max(len(p) for p in phrases)
    out_sentences = []
    for sentence in stream.sentences:
        kept = []
        i = 0
        while i < len(sentence):
            matched = False
            for length in range(min(max_len, len(sentence) - i), 0, -1):
                if tuple(sentence[i : i + length]) in phrases:
                    i += length
                    matched = True
                    break
            if not matched:
                kept.append(sentence[i])
                i += 1
        if kept:
            out_sentences.append(kept)
    return TokenStream(sentences=out_sentences, source_field=stream.source_field)


def _sentence_ngrams(sentence, n_min, n_max):
    for n in range(n_min, n_max + 1):
        for i in range(len(sentence) - n + 1):
            yield tuple(sentence[i : i + n])


def build_stoplist(corpus, doc_frequency_threshold: float, max_phrase_len: int = 4):
    """Find frequent-but-undiscriminative phrases across the corpus.

    A 1-4-gram goes on the stoplist when its incident-level document frequency
    exceeds the threshold and its team-conditional distribution is near
    uniform (normalized entropy >= 0.9), i.e. it says nothing about ownership.
    """
    if not 0.0 < doc_frequency_threshold < 1.0:
        raise ValueError("doc_frequency_threshold must be in (0,1)")
    total = len(corpus.incidents)
    if total == 0:
        return set()
    teams = sorted(corpus.team_index)
    team_pos = {t: i for i, t in enumerate(teams)}

    doc_freq = {}
    team_freq = {}
    for inc in corpus.incidents:
        stream = tokenize(clean_text(incident_text(inc)))
        seen = set()
        for sentence in stream.sentences:
            seen.update(_sentence_ngrams(sentence, 1, max_phrase_len))
        ti = team_pos[inc.owning_team]
        for gram in seen:
            doc_freq[gram] = doc_freq.get(gram, 0) + 1
            counts = team_freq.get(gram)
            if counts is None:
                counts = team_freq[gram] = [0] * len(teams)
            counts[ti] += 1

    min_docs = doc_frequency_threshold * total
    log_teams = math.log(len(teams)) if len(teams) > 1 else None
    stoplist = set()
    for gram, df in doc_freq.items():
        if df <= min_docs or df < 2:
            continue
        if log_teams is None:
            stoplist.add(gram)
            continue
        counts = team_freq[gram]
        n = float(sum(counts))
        entropy = -sum((c / n) * math.log(c / n) for c in counts if c)
        if entropy / log_teams >= 0.9:
            stoplist.add(gram)
    logger.info("stoplist: %d phrases above df>%.2f", len(stoplist), doc_frequency_threshold)
    return stoplist


def extract_key_phrases(stream: TokenStream, idf, k: int, missing_idf: float = 0.0):
    """Top-k 1-3-grams by term frequency x mean member-token idf.

    Stopwords and placeholder tokens never appear in a key phrase. Ties break
    lexicographically so extraction is deterministic.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    tf = {}
    for sentence in stream.sentences:
        for gram in _sentence_ngrams(sentence, 1, 3):
            if any(tok in STOPWORDS for tok in gram):
                continue
            tf[gram] = tf.get(gram, 0) + 1
    scored = []
    for gram, count in tf.items():
        mean_idf = sum(idf.get(tok, missing_idf) for tok in gram) / len(gram)
        score = count * mean_idf
        if score > 0.0:
            scored.append((-score, " ".join(gram)))
    scored.sort()
    return [phrase for _, phrase in scored[:k]]
