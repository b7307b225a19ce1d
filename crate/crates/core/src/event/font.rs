//! Built-in 5×7 bitmap glyphs for the marker charset (digits, 'K', '+').
//!
//! Each glyph is seven rows of five columns; bit 4 is the leftmost column.
//! The atlas is the single source of ink for the synthetic renderer, so a
//! character without a glyph is a configuration error, not a silent blank.

use super::EventError;

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

pub struct FontAtlas {
    glyphs: Vec<(char, [u8; GLYPH_H])>,
}

impl Default for FontAtlas {
    fn default() -> Self {
        Self::builtin()
    }
}

impl FontAtlas {
    pub fn builtin() -> Self {
        let glyphs = vec![
            ('0', [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110]),
            ('1', [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
            ('2', [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111]),
            ('3', [0b01110, 0b10001, 0b00001, 0b00110, 0b00001, 0b10001, 0b01110]),
            ('4', [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010]),
            ('5', [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110]),
            ('6', [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110]),
            ('7', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000]),
            ('8', [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110]),
            ('9', [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100]),
            ('K', [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001]),
            ('+', [0b00000, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0b00000]),
        ];
        Self { glyphs }
    }

    pub fn glyph(&self, c: char) -> Result<&[u8; GLYPH_H], EventError> {
        self.glyphs
            .iter()
            .find(|(gc, _)| *gc == c)
            .map(|(_, rows)| rows)
            .ok_or_else(|| EventError::Config(format!("no glyph for character {c:?}")))
    }

    pub fn has(&self, c: char) -> bool {
        self.glyphs.iter().any(|(gc, _)| *gc == c)
    }

    pub fn is_set(rows: &[u8; GLYPH_H], gy: usize, gx: usize) -> bool {
        rows[gy] >> (GLYPH_W - 1 - gx) & 1 == 1
    }
}
