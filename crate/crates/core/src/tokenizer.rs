//! Shared token vocabulary, the two sequence schemas, and the decoding grammar.
//!
//! Layout boxes serialize as `CLS_c COORD_x0 COORD_y0 COORD_x1 COORD_y1 BOX_SEP`
//! in canonical `(y0, x0, cls)` order. Images serialize as exactly 256
//! `IMG_*` tokens in row-major order.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::world::{BoxSpec, GridImage, Layout, CELLS, GRID, NUM_CLASSES};

pub type TokenId = u8;

pub const VOCAB_SIZE: usize = 37;
pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const TASK_UND: TokenId = 4;
pub const TASK_GEN: TokenId = 5;
pub const BOX_SEP: TokenId = 6;
const IMG_BASE: TokenId = 7;
const COORD_BASE: TokenId = 14;
const CLS_BASE: TokenId = 31;

/// Default context length.
pub const CONTEXT: usize = 320;
/// Tokens per serialized box.
pub const BOX_TOKENS: usize = 6;
/// Upper bound on boxes emitted under the sampling grammar.
pub const MAX_LAYOUT_BOXES: usize = 8;

pub fn img_token(cell: u8) -> TokenId {
    debug_assert!(cell <= NUM_CLASSES);
    IMG_BASE + cell
}

pub fn coord_token(v: u8) -> TokenId {
    debug_assert!(v as usize <= GRID);
    COORD_BASE + v
}

pub fn cls_token(cls: u8) -> TokenId {
    debug_assert!((1..=NUM_CLASSES).contains(&cls));
    CLS_BASE + cls - 1
}

pub fn as_img(t: TokenId) -> Option<u8> {
    (IMG_BASE..COORD_BASE).contains(&t).then(|| t - IMG_BASE)
}

pub fn as_coord(t: TokenId) -> Option<u8> {
    (COORD_BASE..CLS_BASE).contains(&t).then(|| t - COORD_BASE)
}

pub fn as_cls(t: TokenId) -> Option<u8> {
    (CLS_BASE..VOCAB_SIZE as TokenId).contains(&t).then(|| t - CLS_BASE + 1)
}

pub fn token_name(t: TokenId) -> String {
    match t {
        PAD => "PAD".into(),
        BOS => "BOS".into(),
        EOS => "EOS".into(),
        SEP => "SEP".into(),
        TASK_UND => "TASK_UND".into(),
        TASK_GEN => "TASK_GEN".into(),
        BOX_SEP => "BOX_SEP".into(),
        _ => {
            if let Some(c) = as_img(t) {
                format!("IMG_{c}")
            } else if let Some(c) = as_coord(t) {
                format!("COORD_{c}")
            } else if let Some(c) = as_cls(t) {
                format!("CLS_{c}")
            } else {
                format!("<invalid {t}>")
            }
        }
    }
}

/// `id<TAB>name` per line, ids ascending.
pub fn vocab_tsv() -> String {
    (0..VOCAB_SIZE as TokenId)
        .map(|t| format!("{t}\t{}\n", token_name(t)))
        .collect()
}

/// First eight bytes of SHA-256 over [`vocab_tsv`], little-endian.
pub fn vocab_hash() -> u64 {
    let digest = Sha256::digest(vocab_tsv().as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Task direction of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// image -> layout
    Und,
    /// layout -> image
    Gen,
}

/// What a position holds, for loss masking and head selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Prompt,
    LayoutTarget,
    ImageTarget,
}

impl Role {
    pub fn is_target(self) -> bool {
        self != Role::Prompt
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub roles: Vec<Role>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: TokenId, role: Role) {
        self.ids.push(id);
        self.roles.push(role);
    }

    /// Positions holding a target token.
    pub fn target_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_target())
            .map(|(i, _)| i)
    }

    pub fn num_targets(&self) -> usize {
        self.roles.iter().filter(|r| r.is_target()).count()
    }

    /// Tokens at target positions, in order.
    pub fn target_ids(&self) -> Vec<TokenId> {
        self.target_positions().map(|i| self.ids[i]).collect()
    }
}

/// Serializes a layout in canonical order. Length is `6 * |boxes|`.
pub fn encode_layout(layout: &Layout) -> Result<Vec<TokenId>> {
    let canonical = layout.canonical();
    let mut out = Vec::with_capacity(BOX_TOKENS * canonical.len());
    for b in &canonical.instances {
        if !b.is_valid() {
            return Err(Error::Encode(format!("box {b:?} outside the token schema")));
        }
        out.extend_from_slice(&[
            cls_token(b.cls),
            coord_token(b.x0),
            coord_token(b.y0),
            coord_token(b.x1),
            coord_token(b.y1),
            BOX_SEP,
        ]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Strict,
    Lenient,
}

/// Parses layout tokens, optionally terminated by one `EOS`.
///
/// Strict mode follows the grammar exactly and reports the first offending
/// position. Lenient mode keeps every well-formed, non-degenerate six-token
/// box group it can find and never fails.
pub fn decode_layout(tokens: &[TokenId], mode: DecodeMode) -> Result<Layout> {
    match mode {
        DecodeMode::Strict => decode_layout_strict(tokens),
        DecodeMode::Lenient => Ok(decode_layout_lenient(tokens)),
    }
}

fn decode_layout_strict(tokens: &[TokenId]) -> Result<Layout> {
    let mut state = GrammarState::layout_start();
    let mut boxes = Vec::new();
    let mut cur = [0u8; 5];
    for (pos, &t) in tokens.iter().enumerate() {
        if !allowed_tokens_with_cap(state, usize::MAX)[t as usize] {
            return Err(Error::Grammar {
                position: pos,
                message: format!("{} not allowed in state {state:?}", token_name(t)),
            });
        }
        match state {
            GrammarState::ExpectClass { .. } if t != EOS => cur[0] = as_cls(t).unwrap_or(0),
            GrammarState::ExpectCoord { field, .. } => {
                cur[1 + field as usize] = as_coord(t).unwrap_or(0)
            }
            GrammarState::ExpectBoxSep { .. } => {
                boxes.push(BoxSpec::new(cur[0], cur[1], cur[2], cur[3], cur[4]))
            }
            _ => {}
        }
        state = state.advance(t);
    }
    match state {
        GrammarState::ExpectClass { .. } | GrammarState::Done => Ok(Layout::new(boxes)),
        other => Err(Error::Grammar {
            position: tokens.len(),
            message: format!("sequence ends inside a box ({other:?})"),
        }),
    }
}

fn decode_layout_lenient(tokens: &[TokenId]) -> Layout {
    let mut boxes = Vec::new();
    let mut i = 0;
    while i + BOX_TOKENS <= tokens.len() {
        let g = &tokens[i..i + BOX_TOKENS];
        let parsed = (|| {
            let cls = as_cls(g[0])?;
            let c = [as_coord(g[1])?, as_coord(g[2])?, as_coord(g[3])?, as_coord(g[4])?];
            (g[5] == BOX_SEP).then_some((cls, c))
        })();
        match parsed {
            Some((cls, [x0, y0, x1, y1])) => {
                if x0 < x1 && y0 < y1 {
                    boxes.push(BoxSpec::new(cls, x0, y0, x1, y1));
                }
                i += BOX_TOKENS;
            }
            None => i += 1,
        }
    }
    Layout::new(boxes)
}

pub fn encode_image(img: &GridImage) -> Vec<TokenId> {
    img.cells.iter().map(|&c| img_token(c)).collect()
}

pub fn decode_image(tokens: &[TokenId]) -> Result<GridImage> {
    if tokens.len() != CELLS {
        return Err(Error::Format(format!(
            "image needs exactly {CELLS} tokens, got {}",
            tokens.len()
        )));
    }
    let mut img = GridImage::blank();
    for (i, &t) in tokens.iter().enumerate() {
        img.cells[i] = as_img(t).ok_or_else(|| {
            Error::Format(format!("token {} at {i} is not an image cell", token_name(t)))
        })?;
    }
    Ok(img)
}

/// Prompt prefix `[BOS, TASK_*, source..., SEP]`.
pub fn build_prompt(direction: Direction, source: &[TokenId]) -> TokenSeq {
    let task = match direction {
        Direction::Und => TASK_UND,
        Direction::Gen => TASK_GEN,
    };
    let mut seq = TokenSeq::default();
    seq.push(BOS, Role::Prompt);
    seq.push(task, Role::Prompt);
    for &t in source {
        seq.push(t, Role::Prompt);
    }
    seq.push(SEP, Role::Prompt);
    seq
}

pub fn target_role(direction: Direction) -> Role {
    match direction {
        Direction::Und => Role::LayoutTarget,
        Direction::Gen => Role::ImageTarget,
    }
}

/// Appends raw target tokens (which must already end with `EOS`) to a prompt.
pub fn with_targets(prompt: &TokenSeq, direction: Direction, targets: &[TokenId]) -> TokenSeq {
    let mut seq = prompt.clone();
    let role = target_role(direction);
    for &t in targets {
        seq.push(t, role);
    }
    seq
}

/// Full training sequence for one direction.
///
/// und: `[BOS, TASK_UND, img..., SEP, layout..., EOS]`;
/// gen: `[BOS, TASK_GEN, layout..., SEP, img..., EOS]`.
pub fn build_sequence(
    direction: Direction,
    img_tokens: &[TokenId],
    layout_tokens: &[TokenId],
    context: usize,
) -> Result<TokenSeq> {
    let (source, target) = match direction {
        Direction::Und => (img_tokens, layout_tokens),
        Direction::Gen => (layout_tokens, img_tokens),
    };
    let len = 2 + source.len() + 1 + target.len() + 1;
    if len > context {
        return Err(Error::Length { len, context });
    }
    let mut targets = target.to_vec();
    targets.push(EOS);
    Ok(with_targets(&build_prompt(direction, source), direction, &targets))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordField {
    X0 = 0,
    Y0 = 1,
    X1 = 2,
    Y1 = 3,
}

/// Decoder position within a target region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrammarState {
    ExpectClass { boxes: usize },
    ExpectCoord { boxes: usize, field: CoordField, x0: u8, y0: u8 },
    ExpectBoxSep { boxes: usize },
    /// `cells` image tokens emitted so far; at 256 only `EOS` remains.
    ExpectImageCell { cells: usize },
    Done,
}

pub type TokenMask = [bool; VOCAB_SIZE];

impl GrammarState {
    pub fn layout_start() -> Self {
        GrammarState::ExpectClass { boxes: 0 }
    }

    pub fn image_start() -> Self {
        GrammarState::ExpectImageCell { cells: 0 }
    }

    pub fn start(direction: Direction) -> Self {
        match direction {
            Direction::Und => Self::layout_start(),
            Direction::Gen => Self::image_start(),
        }
    }

    /// Transition on `t`. Tokens outside the allowed set leave `Done`.
    pub fn advance(self, t: TokenId) -> GrammarState {
        use CoordField::*;
        use GrammarState::*;
        match self {
            ExpectClass { boxes } => {
                if t == EOS {
                    Done
                } else {
                    ExpectCoord { boxes, field: X0, x0: 0, y0: 0 }
                }
            }
            ExpectCoord { boxes, field, x0, y0 } => {
                let v = as_coord(t).unwrap_or(0);
                match field {
                    X0 => ExpectCoord { boxes, field: Y0, x0: v, y0 },
                    Y0 => ExpectCoord { boxes, field: X1, x0, y0: v },
                    X1 => ExpectCoord { boxes, field: Y1, x0, y0 },
                    Y1 => ExpectBoxSep { boxes },
                }
            }
            ExpectBoxSep { boxes } => ExpectClass { boxes: boxes + 1 },
            ExpectImageCell { cells } if cells < CELLS => ExpectImageCell { cells: cells + 1 },
            ExpectImageCell { .. } | Done => Done,
        }
    }

    pub fn is_done(self) -> bool {
        self == GrammarState::Done
    }
}

/// Allowed next tokens under the sampling grammar (at most
/// [`MAX_LAYOUT_BOXES`] boxes per layout).
pub fn allowed_tokens(state: GrammarState) -> TokenMask {
    allowed_tokens_with_cap(state, MAX_LAYOUT_BOXES)
}

fn allowed_tokens_with_cap(state: GrammarState, max_boxes: usize) -> TokenMask {
    let mut mask = [false; VOCAB_SIZE];
    let grid = GRID as u8;
    match state {
        GrammarState::ExpectClass { boxes } => {
            mask[EOS as usize] = true;
            if boxes < max_boxes {
                for c in 1..=NUM_CLASSES {
                    mask[cls_token(c) as usize] = true;
                }
            }
        }
        GrammarState::ExpectCoord { field, x0, y0, .. } => {
            let range = match field {
                CoordField::X0 | CoordField::Y0 => 0..grid,
                CoordField::X1 => x0 + 1..grid + 1,
                CoordField::Y1 => y0 + 1..grid + 1,
            };
            for v in range {
                mask[coord_token(v) as usize] = true;
            }
        }
        GrammarState::ExpectBoxSep { .. } => mask[BOX_SEP as usize] = true,
        GrammarState::ExpectImageCell { cells } => {
            if cells < CELLS {
                for c in 0..=NUM_CLASSES {
                    mask[img_token(c) as usize] = true;
                }
            } else {
                mask[EOS as usize] = true;
            }
        }
        GrammarState::Done => {}
    }
    mask
}
