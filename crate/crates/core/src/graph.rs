//! Left-to-right CTC decoding graph for a single keyword.
//!
//! Layout for a keyword `y_1..y_U` (state indices in brackets):
//!
//! ```text
//! [0] pad_start, [1] y_1, [2] -, [3] y_2, ..., [2U-1] y_U, [2U] pad_end
//! ```
//!
//! Core state `l` (1-based, `1..=2U-1`) is non-blank when odd and blank when
//! even; both map to owner token `(l - 1) / 2` (0-based).

use crate::vocab::{KeywordTokens, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    PadStart,
    NonBlank,
    Blank,
    PadEnd,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphState {
    pub token: TokenId,
    pub kind: StateKind,
    /// 0-based index of the keyword token whose accumulator this state feeds.
    pub owner: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GraphOptions {
    /// Allow the blank-skip edge between identical consecutive tokens.
    /// Off by default: with it on, "ll" and "l" collapse to the same label.
    pub allow_repeat_skip: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodingGraph {
    keyword: KeywordTokens,
    states: Vec<GraphState>,
    /// Upstream states for each state, ordered self, previous, previous-previous.
    /// Tie-breaking in the aligner follows this order.
    sources: Vec<Vec<usize>>,
    options: GraphOptions,
}

impl DecodingGraph {
    pub fn build(keyword: &KeywordTokens, vocab: &Vocabulary) -> Self {
        Self::with_options(keyword, vocab, GraphOptions::default())
    }

    pub fn with_options(keyword: &KeywordTokens, vocab: &Vocabulary, options: GraphOptions) -> Self {
        let y = keyword.tokens();
        let u_len = y.len();
        let mut states = Vec::with_capacity(2 * u_len + 1);
        states.push(GraphState {
            token: vocab.padding_id(),
            kind: StateKind::PadStart,
            owner: None,
        });
        for (u, &tok) in y.iter().enumerate() {
            if u > 0 {
                states.push(GraphState {
                    token: vocab.blank_id(),
                    kind: StateKind::Blank,
                    owner: Some(u - 1),
                });
            }
            states.push(GraphState {
                token: tok,
                kind: StateKind::NonBlank,
                owner: Some(u),
            });
        }
        states.push(GraphState {
            token: vocab.padding_id(),
            kind: StateKind::PadEnd,
            owner: Some(u_len - 1),
        });

        let sources = (0..states.len())
            .map(|l| match states[l].kind {
                StateKind::PadStart => Vec::new(),
                StateKind::Blank => vec![l, l - 1],
                // pad_end never skips: l-2 is the blank before y_U (or pad_start)
                StateKind::PadEnd => vec![l, l - 1],
                StateKind::NonBlank => {
                    let mut s = vec![l, l - 1];
                    if l >= 3 && (options.allow_repeat_skip || states[l].token != states[l - 2].token) {
                        s.push(l - 2);
                    }
                    s
                }
            })
            .collect();

        Self {
            keyword: keyword.clone(),
            states,
            sources,
            options,
        }
    }

    pub fn keyword(&self) -> &KeywordTokens {
        &self.keyword
    }

    pub fn options(&self) -> GraphOptions {
        self.options
    }

    pub fn states(&self) -> &[GraphState] {
        &self.states
    }

    pub fn state(&self, l: usize) -> &GraphState {
        &self.states[l]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `U`.
    pub fn token_count(&self) -> usize {
        self.keyword.len()
    }

    /// Number of core states, `2U - 1`.
    pub fn core_len(&self) -> usize {
        2 * self.keyword.len() - 1
    }

    pub fn pad_start(&self) -> usize {
        0
    }

    pub fn pad_end(&self) -> usize {
        self.states.len() - 1
    }

    pub fn allowed_sources(&self, l: usize) -> &[usize] {
        &self.sources[l]
    }

    /// Core state index of non-blank token `u` (0-based).
    pub fn token_state(&self, u: usize) -> usize {
        2 * u + 1
    }
}
