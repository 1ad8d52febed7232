/// Whitespace-separated ASCII header tokens shared by PFM and PNM, with
/// `#` comments skipped.
pub(super) struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn token(&mut self) -> Option<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.bytes.get(self.pos) == Some(&b'#') {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| std::str::from_utf8(&self.bytes[start..self.pos]).ok())?
    }

    /// Consume the single whitespace byte that ends the header and return
    /// the payload.
    pub fn payload(mut self) -> Option<&'a [u8]> {
        if !self.bytes.get(self.pos)?.is_ascii_whitespace() {
            return None;
        }
        self.pos += 1;
        Some(&self.bytes[self.pos..])
    }
}
