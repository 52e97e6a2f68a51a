use ndarray::Array2;
use rand::Rng;

use super::ops::{gelu, gelu_grad};
use super::{
    join, LayerNorm, LayerNormCache, Linear, MultiHeadAttention, Param, Parameters,
    SelfAttentionCache, TimeLayout,
};
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct FeedForward<R> {
    pub up: Linear<R>,
    pub down: Linear<R>,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache<R> {
    x: Array2<R>,
    pre: Array2<R>,
    act: Array2<R>,
}

impl<R: Real> FeedForward<R> {
    pub fn new<G: Rng>(d: usize, hidden: usize, rng: &mut G) -> Self {
        Self {
            up: Linear::new(d, hidden, rng),
            down: Linear::new(hidden, d, rng),
        }
    }

    pub fn forward(&self, x: &Array2<R>) -> (Array2<R>, FeedForwardCache<R>) {
        let pre = self.up.forward(x);
        let act = pre.mapv(gelu);
        let y = self.down.forward(&act);
        (
            y,
            FeedForwardCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&mut self, cache: &FeedForwardCache<R>, dy: &Array2<R>) -> Array2<R> {
        let mut dact = self.down.backward(&cache.act, dy);
        dact.zip_mut_with(&cache.pre, |g, &p| *g *= gelu_grad(p));
        self.up.backward(&cache.x, &dact)
    }
}

impl<R: Real> Parameters<R> for FeedForward<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        self.up.collect(&join(prefix, "up"), out);
        self.down.collect(&join(prefix, "down"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        self.up.collect_mut(&join(prefix, "up"), out);
        self.down.collect_mut(&join(prefix, "down"), out);
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `+ FFN(LN(·))`.
#[derive(Clone, Debug)]
pub struct Block<R> {
    pub ln1: LayerNorm<R>,
    pub attn: MultiHeadAttention<R>,
    pub ln2: LayerNorm<R>,
    pub ffn: FeedForward<R>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<R> {
    ln1: LayerNormCache<R>,
    attn: SelfAttentionCache<R>,
    ln2: LayerNormCache<R>,
    ffn: FeedForwardCache<R>,
}

impl<R: Real> Block<R> {
    pub fn new<G: Rng>(d: usize, heads: usize, hidden: usize, rng: &mut G) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            attn: MultiHeadAttention::new(d, heads, rng),
            ln2: LayerNorm::new(d),
            ffn: FeedForward::new(d, hidden, rng),
        }
    }

    pub fn forward(&self, x: &Array2<R>, layout: &TimeLayout) -> (Array2<R>, BlockCache<R>) {
        let (a, ln1) = self.ln1.forward(x);
        let (attn_out, attn) = self.attn.forward(&a, layout);
        let mid = x + &attn_out;
        let (b, ln2) = self.ln2.forward(&mid);
        let (ffn_out, ffn) = self.ffn.forward(&b);
        (mid + &ffn_out, BlockCache { ln1, attn, ln2, ffn })
    }

    pub fn backward(&mut self, cache: &BlockCache<R>, layout: &TimeLayout, dy: &Array2<R>) -> Array2<R> {
        let db = self.ffn.backward(&cache.ffn, dy);
        let dmid = dy + &self.ln2.backward(&cache.ln2, &db);
        let da = self.attn.backward(&cache.attn, layout, &dmid);
        dmid + &self.ln1.backward(&cache.ln1, &da)
    }
}

impl<R: Real> Parameters<R> for Block<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        self.ln1.collect(&join(prefix, "ln1"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        self.ln2.collect(&join(prefix, "ln2"), out);
        self.ffn.collect(&join(prefix, "ffn"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        self.ln1.collect_mut(&join(prefix, "ln1"), out);
        self.attn.collect_mut(&join(prefix, "attn"), out);
        self.ln2.collect_mut(&join(prefix, "ln2"), out);
        self.ffn.collect_mut(&join(prefix, "ffn"), out);
    }
}

/// A stack of blocks followed by a final layer norm. With zero blocks the
/// stack is the identity (no final norm either).
#[derive(Clone, Debug)]
pub struct Stack<R> {
    pub blocks: Vec<Block<R>>,
    pub ln_out: LayerNorm<R>,
}

#[derive(Clone, Debug)]
pub struct StackCache<R> {
    layout: TimeLayout,
    blocks: Vec<BlockCache<R>>,
    ln_out: Option<LayerNormCache<R>>,
}

impl<R: Real> Stack<R> {
    pub fn new<G: Rng>(layers: usize, d: usize, heads: usize, hidden: usize, rng: &mut G) -> Self {
        Self {
            blocks: (0..layers).map(|_| Block::new(d, heads, hidden, rng)).collect(),
            ln_out: LayerNorm::new(d),
        }
    }

    /// `layout` gives the relative-time bucket of every pair of rows.
    pub fn forward(&self, x: &Array2<R>, layout: TimeLayout) -> (Array2<R>, StackCache<R>) {
        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h, &layout);
            h = next;
            blocks.push(cache);
        }
        if self.blocks.is_empty() {
            return (
                h,
                StackCache {
                    layout,
                    blocks,
                    ln_out: None,
                },
            );
        }
        let (y, ln) = self.ln_out.forward(&h);
        (
            y,
            StackCache {
                layout,
                blocks,
                ln_out: Some(ln),
            },
        )
    }

    pub fn backward(&mut self, cache: &StackCache<R>, dy: &Array2<R>) -> Array2<R> {
        let mut g = match &cache.ln_out {
            Some(ln) => self.ln_out.backward(ln, dy),
            None => dy.clone(),
        };
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = block.backward(c, &cache.layout, &g);
        }
        g
    }
}

impl<R: Real> Parameters<R> for Stack<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("block{i}")), out);
        }
        if !self.blocks.is_empty() {
            self.ln_out.collect(&join(prefix, "ln_out"), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        let has_blocks = !self.blocks.is_empty();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("block{i}")), out);
        }
        if has_blocks {
            self.ln_out.collect_mut(&join(prefix, "ln_out"), out);
        }
    }
}
