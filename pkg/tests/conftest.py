import pytest

from argstance.corpus import Label, SentenceUnit
from argstance.encoding import naive_pvp, pvp_texts, tokenizer_from_units, verbalize
from argstance.synthetic import make_dataset


def unit(
    uid="u1",
    text="wir fordern die lieferung sofort",
    label=Label.CLAIM_FOR,
    before=(),
    after=(),
    onion=False,
    doc_id="d1",
    sent_index=0,
):
    return SentenceUnit(
        unit_id=uid,
        doc_id=doc_id,
        sent_index=sent_index,
        text=text,
        label=label,
        context_before=tuple(before),
        context_after=tuple(after),
        onion=onion,
    )


@pytest.fixture
def small_dataset():
    return make_dataset(60, seed=11)


@pytest.fixture
def toy_tokenizer(small_dataset):
    pvp = naive_pvp()
    return tokenizer_from_units(small_dataset.units, extra_texts=pvp_texts(pvp))


@pytest.fixture
def naive(toy_tokenizer):
    return verbalize(naive_pvp(), toy_tokenizer)
