//! Turns a [`SequenceExample`] into the interleaved text/item token sequence.

use rand::Rng;

use crate::catalog::{Catalog, Field, SequenceExample, Vocab};
use crate::token::TokenId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderPolicy {
    /// Probability that a whole example is rendered with item tokens only.
    pub id_only_fraction: f64,
    /// Per item, per field probability of keeping a present metadata field.
    pub metadata_keep_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub tokens: Vec<TokenId>,
    pub id_only: bool,
}

fn push_words(out: &mut Vec<TokenId>, ids: impl IntoIterator<Item = usize>) {
    out.extend(ids.into_iter().map(TokenId::Text));
}

fn render(example: &SequenceExample, catalog: &Catalog, vocab: &Vocab, mut keep: impl FnMut() -> bool, id_only: bool) -> Vec<TokenId> {
    let mut out = Vec::new();
    push_words(&mut out, vocab.prefix());
    let id_marker = vocab.marker(crate::catalog::FIELD_MARKERS[0]);
    for entry in &example.history {
        out.push(TokenId::Text(id_marker));
        out.push(TokenId::Item(entry.item));
        if id_only {
            continue;
        }
        let record = catalog.get(entry.item);
        for field in entry.fields.fields() {
            if !keep() {
                continue;
            }
            out.push(TokenId::Text(vocab.marker(field.marker())));
            match field {
                Field::Price => {
                    if let Some(p) = record.price {
                        out.push(TokenId::Text(vocab.price_token(p)));
                    }
                }
                _ => {
                    if let Some(text) = record.text_field(field) {
                        push_words(&mut out, vocab.encode(text));
                    }
                }
            }
        }
    }
    push_words(&mut out, vocab.suffix());
    out
}

/// Training-time rendering: ID-only with probability `id_only_fraction`,
/// otherwise each present field of each history item is kept independently.
pub fn render_example<R: Rng>(
    example: &SequenceExample,
    catalog: &Catalog,
    vocab: &Vocab,
    policy: RenderPolicy,
    rng: &mut R,
) -> Rendered {
    let id_only = rng.gen_bool(policy.id_only_fraction);
    let tokens = render(example, catalog, vocab, || rng.gen_bool(policy.metadata_keep_prob), id_only);
    Rendered { tokens, id_only }
}

/// Evaluation rendering: prompt text and item tokens, no metadata.
pub fn render_id_only(example: &SequenceExample, catalog: &Catalog, vocab: &Vocab) -> Vec<TokenId> {
    render(example, catalog, vocab, || false, true)
}
