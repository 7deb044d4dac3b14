//! Text parser for the IR.
//!
//! The grammar is self-delimiting (fixed arities, comma-separated operand
//! lists), so newlines are ordinary whitespace and the canonical
//! one-instruction-per-line layout is a printing convention, not a parsing
//! requirement. Comments run from `;` to end of line.

use super::*;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Reg(String),
    Global(String),
    /// Integer literal. `hex` keeps the raw digits so long hex strings can
    /// double as byte initializers.
    Num { text: String, hex: bool, neg: bool },
    Colon,
    Comma,
    Eq,
    LParen,
    RParen,
    LBrace,
    RBrace,
}

#[derive(Debug, Clone)]
struct Sp {
    tok: Tok,
    loc: Loc,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: u32,
    col: u32,
}

fn is_ident_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c == b'.'
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src: src.as_bytes(), pos: 0, line: 1, col: 1 }
    }

    fn bump(&mut self) -> Option<u8> {
        let c = *self.src.get(self.pos)?;
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn loc(&self) -> Loc {
        Loc { line: self.line, col: self.col }
    }

    fn lex(mut self) -> Result<Vec<Sp>, Diagnostic> {
        let mut out = Vec::new();
        loop {
            // skip whitespace and comments
            loop {
                match self.peek() {
                    Some(c) if c.is_ascii_whitespace() => {
                        self.bump();
                    }
                    Some(b';') => {
                        while let Some(c) = self.peek() {
                            if c == b'\n' {
                                break;
                            }
                            self.bump();
                        }
                    }
                    _ => break,
                }
            }
            let loc = self.loc();
            let c = match self.peek() {
                None => return Ok(out),
                Some(c) => c,
            };
            let tok = match c {
                b':' => {
                    self.bump();
                    Tok::Colon
                }
                b',' => {
                    self.bump();
                    Tok::Comma
                }
                b'=' => {
                    self.bump();
                    Tok::Eq
                }
                b'(' => {
                    self.bump();
                    Tok::LParen
                }
                b')' => {
                    self.bump();
                    Tok::RParen
                }
                b'{' => {
                    self.bump();
                    Tok::LBrace
                }
                b'}' => {
                    self.bump();
                    Tok::RBrace
                }
                b'%' | b'@' => {
                    self.bump();
                    let mut name = String::new();
                    while let Some(d) = self.peek() {
                        if is_ident_char(d) {
                            name.push(d as char);
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    if name.is_empty() {
                        return Err(Diagnostic::new(
                            DiagKind::Syntax,
                            loc,
                            format!("expected name after '{}'", c as char),
                        ));
                    }
                    if c == b'%' {
                        Tok::Reg(name)
                    } else {
                        Tok::Global(name)
                    }
                }
                b'-' | b'0'..=b'9' => {
                    let neg = c == b'-';
                    if neg {
                        self.bump();
                    }
                    let mut text = String::new();
                    let hex = self.peek() == Some(b'0') && {
                        // lookahead for 0x
                        self.src.get(self.pos + 1).copied() == Some(b'x')
                    };
                    if hex {
                        self.bump();
                        self.bump();
                        while let Some(d) = self.peek() {
                            if d.is_ascii_hexdigit() {
                                text.push(d as char);
                                self.bump();
                            } else {
                                break;
                            }
                        }
                        if text.is_empty() || neg {
                            return Err(Diagnostic::new(
                                DiagKind::Syntax,
                                loc,
                                "malformed hex literal",
                            ));
                        }
                    } else {
                        while let Some(d) = self.peek() {
                            if d.is_ascii_digit() {
                                text.push(d as char);
                                self.bump();
                            } else {
                                break;
                            }
                        }
                        if text.is_empty() {
                            return Err(Diagnostic::new(
                                DiagKind::Syntax,
                                loc,
                                "expected digits after '-'",
                            ));
                        }
                    }
                    Tok::Num { text, hex, neg }
                }
                c if is_ident_char(c) => {
                    let mut name = String::new();
                    while let Some(d) = self.peek() {
                        if is_ident_char(d) {
                            name.push(d as char);
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    Tok::Ident(name)
                }
                other => {
                    return Err(Diagnostic::new(
                        DiagKind::Syntax,
                        loc,
                        format!("unexpected character '{}'", other as char),
                    ))
                }
            };
            out.push(Sp { tok, loc });
        }
    }
}

struct Parser {
    toks: Vec<Sp>,
    pos: usize,
    diags: Vec<Diagnostic>,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|s| &s.tok)
    }

    fn peek2(&self) -> Option<&Tok> {
        self.toks.get(self.pos + 1).map(|s| &s.tok)
    }

    fn loc(&self) -> Loc {
        self.toks
            .get(self.pos)
            .map(|s| s.loc)
            .unwrap_or_else(|| self.toks.last().map(|s| s.loc).unwrap_or_default())
    }

    fn bump(&mut self) -> Option<Sp> {
        let s = self.toks.get(self.pos).cloned();
        if s.is_some() {
            self.pos += 1;
        }
        s
    }

    fn err(&self, msg: impl Into<String>) -> Diagnostic {
        Diagnostic::new(DiagKind::Syntax, self.loc(), msg)
    }

    fn expect_tok(&mut self, t: Tok, what: &str) -> Result<Loc, Diagnostic> {
        let loc = self.loc();
        match self.bump() {
            Some(s) if s.tok == t => Ok(loc),
            _ => Err(Diagnostic::new(DiagKind::Syntax, loc, format!("expected {what}"))),
        }
    }

    fn expect_ident(&mut self) -> Result<(String, Loc), Diagnostic> {
        let loc = self.loc();
        match self.bump() {
            Some(Sp { tok: Tok::Ident(s), .. }) => Ok((s, loc)),
            _ => Err(Diagnostic::new(DiagKind::Syntax, loc, "expected identifier")),
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<Loc, Diagnostic> {
        let loc = self.loc();
        match self.bump() {
            Some(Sp { tok: Tok::Ident(s), .. }) if s == kw => Ok(loc),
            _ => Err(Diagnostic::new(DiagKind::Syntax, loc, format!("expected '{kw}'"))),
        }
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Ident(s)) if s == kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_tok(&mut self, t: &Tok) -> bool {
        if self.peek() == Some(t) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_ty(&mut self) -> Result<Ty, Diagnostic> {
        let loc = self.loc();
        match self.bump() {
            Some(Sp { tok: Tok::Ident(s), .. }) => Ty::from_name(&s)
                .ok_or_else(|| Diagnostic::new(DiagKind::Syntax, loc, format!("unknown type '{s}'"))),
            _ => Err(Diagnostic::new(DiagKind::Syntax, loc, "expected type")),
        }
    }

    /// Unsigned integer literal that must fit in u64.
    fn expect_u64(&mut self, what: &str) -> Result<u64, Diagnostic> {
        let loc = self.loc();
        match self.bump() {
            Some(Sp { tok: Tok::Num { text, hex, neg: false }, .. }) => {
                let radix = if hex { 16 } else { 10 };
                u64::from_str_radix(&text, radix)
                    .map_err(|_| Diagnostic::new(DiagKind::Syntax, loc, format!("bad {what}")))
            }
            _ => Err(Diagnostic::new(DiagKind::Syntax, loc, format!("expected {what}"))),
        }
    }

    /// Integer literal masked to `ty`.
    fn num_to_imm(&self, text: &str, hex: bool, neg: bool, ty: Ty, loc: Loc) -> Result<u128, Diagnostic> {
        let radix = if hex { 16 } else { 10 };
        let mag = u128::from_str_radix(text, radix)
            .map_err(|_| Diagnostic::new(DiagKind::Syntax, loc, "integer literal out of range"))?;
        let bits = if neg { mag.wrapping_neg() } else { mag };
        Ok(bits & ty.mask())
    }

    fn expect_operand(&mut self, ty: Ty) -> Result<Operand, Diagnostic> {
        let loc = self.loc();
        match self.bump() {
            Some(Sp { tok: Tok::Reg(r), .. }) => Ok(Operand::Reg(r)),
            Some(Sp { tok: Tok::Global(g), .. }) => Ok(Operand::Global(g)),
            Some(Sp { tok: Tok::Num { text, hex, neg }, .. }) => {
                Ok(Operand::Imm(self.num_to_imm(&text, hex, neg, ty, loc)?))
            }
            _ => Err(Diagnostic::new(DiagKind::Syntax, loc, "expected operand")),
        }
    }

    fn parse_global(&mut self) -> Result<GlobalDef, Diagnostic> {
        let loc = self.expect_keyword("global")?;
        let (name, _) = self.expect_ident()?;
        self.expect_tok(Tok::Colon, "':'")?;
        let size = self.expect_u64("size")?;
        self.expect_tok(Tok::Eq, "'='")?;
        let init_loc = self.loc();
        let init = match self.bump() {
            Some(Sp { tok: Tok::Num { text, hex: true, neg: false }, .. }) => {
                if text.len() % 2 != 0 {
                    return Err(Diagnostic::new(
                        DiagKind::Syntax,
                        init_loc,
                        "initializer must have an even number of hex digits",
                    ));
                }
                let mut bytes = Vec::with_capacity(text.len() / 2);
                for i in (0..text.len()).step_by(2) {
                    bytes.push(u8::from_str_radix(&text[i..i + 2], 16).unwrap());
                }
                bytes
            }
            _ => {
                return Err(Diagnostic::new(
                    DiagKind::Syntax,
                    init_loc,
                    "expected hex initializer (0x...)",
                ))
            }
        };
        let secret = self.eat_keyword("secret");
        Ok(GlobalDef { name, size, init, secret, loc })
    }

    fn parse_meta(&mut self) -> Result<TransformMeta, Diagnostic> {
        self.expect_keyword("transformed")?;
        self.expect_keyword("policy")?;
        self.expect_tok(Tok::Eq, "'='")?;
        let (mode_name, mloc) = self.expect_ident()?;
        let policy = PolicyMode::from_name(&mode_name).ok_or_else(|| {
            Diagnostic::new(DiagKind::Syntax, mloc, format!("unknown policy '{mode_name}'"))
        })?;
        self.expect_keyword("prefix")?;
        self.expect_tok(Tok::Eq, "'='")?;
        let loc = self.loc();
        let prefix = match self.bump() {
            Some(Sp { tok: Tok::Num { text, hex: true, neg: false }, .. }) => {
                u32::from_str_radix(&text, 16)
                    .map_err(|_| Diagnostic::new(DiagKind::Syntax, loc, "prefix out of range"))?
            }
            _ => return Err(Diagnostic::new(DiagKind::Syntax, loc, "expected hex prefix")),
        };
        Ok(TransformMeta { policy, prefix })
    }

    fn parse_call_tail(&mut self, ret_ty: Option<Ty>, dst: Option<String>) -> Result<InstKind, Diagnostic> {
        let callee = match self.bump() {
            Some(Sp { tok: Tok::Global(g), .. }) => g,
            _ => return Err(self.err("expected '@function' callee")),
        };
        self.expect_tok(Tok::LParen, "'('")?;
        let mut args = Vec::new();
        if !self.eat_tok(&Tok::RParen) {
            loop {
                let ty = self.expect_ty()?;
                let op = self.expect_operand(ty)?;
                args.push((ty, op));
                if self.eat_tok(&Tok::RParen) {
                    break;
                }
                self.expect_tok(Tok::Comma, "',' or ')'")?;
            }
        }
        Ok(InstKind::Call { dst, ret_ty, callee, args })
    }

    /// `, align N` suffix; returns `default` when absent.
    fn parse_align(&mut self, default: u64) -> Result<u64, Diagnostic> {
        let save = self.pos;
        if self.eat_tok(&Tok::Comma) {
            if self.eat_keyword("align") {
                return self.expect_u64("alignment");
            }
            self.pos = save;
        }
        Ok(default)
    }

    fn parse_assign(&mut self, dst: String, loc: Loc) -> Result<Inst, Diagnostic> {
        self.expect_tok(Tok::Eq, "'='")?;
        let (op_name, op_loc) = self.expect_ident()?;
        let kind = match op_name.as_str() {
            "const" => {
                let ty = self.expect_ty()?;
                let vloc = self.loc();
                match self.bump() {
                    Some(Sp { tok: Tok::Num { text, hex, neg }, .. }) => InstKind::Const {
                        dst,
                        ty,
                        value: self.num_to_imm(&text, hex, neg, ty, vloc)?,
                    },
                    _ => return Err(Diagnostic::new(DiagKind::Syntax, vloc, "expected constant")),
                }
            }
            "alloca" | "secret_alloca" => {
                let ty = self.expect_ty()?;
                let mut count = 1;
                let mut align = ty.size().min(8);
                let mut secret = false;
                // optional: , count   , align N   , secret
                loop {
                    let save = self.pos;
                    if !self.eat_tok(&Tok::Comma) {
                        break;
                    }
                    match self.peek() {
                        Some(Tok::Ident(s)) if s == "align" => {
                            self.bump();
                            align = self.expect_u64("alignment")?;
                        }
                        Some(Tok::Ident(s)) if s == "secret" => {
                            self.bump();
                            secret = true;
                        }
                        Some(Tok::Num { .. }) => {
                            count = self.expect_u64("element count")?;
                        }
                        _ => {
                            self.pos = save;
                            break;
                        }
                    }
                }
                if op_name == "alloca" {
                    InstKind::Alloca { dst, ty, count, align, secret }
                } else {
                    if secret {
                        return Err(Diagnostic::new(
                            DiagKind::Syntax,
                            op_loc,
                            "secret_alloca does not take a secret attribute",
                        ));
                    }
                    InstKind::SecretAlloca { dst, ty, count, align }
                }
            }
            "load" => {
                let ty = self.expect_ty()?;
                self.expect_tok(Tok::Comma, "','")?;
                self.expect_keyword("ptr")?;
                let addr = self.expect_operand(Ty::Ptr)?;
                let align = self.parse_align(ty.size().min(8))?;
                InstKind::Load { dst, ty, addr, align }
            }
            "gep" => {
                let ty = self.expect_ty()?;
                self.expect_tok(Tok::Comma, "','")?;
                self.expect_keyword("ptr")?;
                let base = self.expect_operand(Ty::Ptr)?;
                self.expect_tok(Tok::Comma, "','")?;
                let index = self.expect_operand(Ty::I64)?;
                InstKind::Gep { dst, ty, base, index }
            }
            "icmp" => {
                let (cond_name, cloc) = self.expect_ident()?;
                let cond = IcmpCond::from_name(&cond_name).ok_or_else(|| {
                    Diagnostic::new(DiagKind::Syntax, cloc, format!("unknown condition '{cond_name}'"))
                })?;
                let ty = self.expect_ty()?;
                let lhs = self.expect_operand(ty)?;
                self.expect_tok(Tok::Comma, "','")?;
                let rhs = self.expect_operand(ty)?;
                InstKind::Icmp { dst, cond, ty, lhs, rhs }
            }
            "select" => {
                let ty = self.expect_ty()?;
                let cond = self.expect_operand(Ty::I64)?;
                self.expect_tok(Tok::Comma, "','")?;
                let then_v = self.expect_operand(ty)?;
                self.expect_tok(Tok::Comma, "','")?;
                let else_v = self.expect_operand(ty)?;
                InstKind::Select { dst, ty, cond, then_v, else_v }
            }
            "call" => {
                let ty = self.expect_ty()?;
                self.parse_call_tail(Some(ty), Some(dst))?
            }
            other => {
                if let Some(op) = BinOp::from_name(other) {
                    let ty = self.expect_ty()?;
                    let lhs = self.expect_operand(ty)?;
                    self.expect_tok(Tok::Comma, "','")?;
                    let rhs = self.expect_operand(ty)?;
                    InstKind::Bin { dst, op, ty, lhs, rhs }
                } else {
                    return Err(Diagnostic::new(
                        DiagKind::Syntax,
                        op_loc,
                        format!("unknown opcode '{other}'"),
                    ));
                }
            }
        };
        Ok(Inst { loc, kind })
    }

    fn parse_inst(&mut self) -> Result<Inst, Diagnostic> {
        let loc = self.loc();
        match self.peek().cloned() {
            Some(Tok::Reg(dst)) => {
                self.bump();
                self.parse_assign(dst, loc)
            }
            Some(Tok::Ident(kw)) => match kw.as_str() {
                "store" => {
                    self.bump();
                    let ty = self.expect_ty()?;
                    let value = self.expect_operand(ty)?;
                    self.expect_tok(Tok::Comma, "','")?;
                    self.expect_keyword("ptr")?;
                    let addr = self.expect_operand(Ty::Ptr)?;
                    let align = self.parse_align(ty.size().min(8))?;
                    Ok(Inst { loc, kind: InstKind::Store { ty, value, addr, align } })
                }
                "call" => {
                    self.bump();
                    self.expect_keyword("void")?;
                    let kind = self.parse_call_tail(None, None)?;
                    Ok(Inst { loc, kind })
                }
                "br" => {
                    self.bump();
                    let (target, _) = self.expect_ident()?;
                    Ok(Inst { loc, kind: InstKind::Br { target } })
                }
                "condbr" => {
                    self.bump();
                    let cond = self.expect_operand(Ty::I64)?;
                    self.expect_tok(Tok::Comma, "','")?;
                    let (then_l, _) = self.expect_ident()?;
                    self.expect_tok(Tok::Comma, "','")?;
                    let (else_l, _) = self.expect_ident()?;
                    Ok(Inst { loc, kind: InstKind::CondBr { cond, then_l, else_l } })
                }
                "ret" => {
                    self.bump();
                    if self.eat_keyword("void") {
                        Ok(Inst { loc, kind: InstKind::Ret { value: None } })
                    } else {
                        let ty = self.expect_ty()?;
                        let v = self.expect_operand(ty)?;
                        Ok(Inst { loc, kind: InstKind::Ret { value: Some((ty, v)) } })
                    }
                }
                other => Err(self.err(format!("expected instruction, found '{other}'"))),
            },
            _ => Err(self.err("expected instruction")),
        }
    }

    fn parse_function(&mut self) -> Result<FunctionDef, Diagnostic> {
        let loc = self.expect_keyword("fn")?;
        let (name, _) = self.expect_ident()?;
        self.expect_tok(Tok::LParen, "'('")?;
        let mut params = Vec::new();
        if !self.eat_tok(&Tok::RParen) {
            loop {
                let ploc = self.loc();
                let pname = match self.bump() {
                    Some(Sp { tok: Tok::Reg(r), .. }) => r,
                    _ => return Err(Diagnostic::new(DiagKind::Syntax, ploc, "expected parameter '%name'")),
                };
                self.expect_tok(Tok::Colon, "':'")?;
                let ty = self.expect_ty()?;
                params.push(Param { name: pname, ty });
                if self.eat_tok(&Tok::RParen) {
                    break;
                }
                self.expect_tok(Tok::Comma, "',' or ')'")?;
            }
        }
        self.expect_tok(Tok::LBrace, "'{'")?;
        let mut blocks: Vec<Block> = Vec::new();
        loop {
            match self.peek() {
                Some(Tok::RBrace) => {
                    self.bump();
                    break;
                }
                Some(Tok::Ident(_)) if self.peek2() == Some(&Tok::Colon) => {
                    let (label, bloc) = self.expect_ident()?;
                    self.expect_tok(Tok::Colon, "':'")?;
                    blocks.push(Block { label, insts: Vec::new(), loc: bloc });
                }
                Some(_) => {
                    let inst = self.parse_inst()?;
                    if blocks.is_empty() {
                        // implicit entry label for the first block
                        blocks.push(Block { label: "entry".into(), insts: Vec::new(), loc: inst.loc });
                    }
                    blocks.last_mut().unwrap().insts.push(inst);
                }
                None => return Err(self.err("unexpected end of input inside function")),
            }
        }
        Ok(FunctionDef { name, params, blocks, loc })
    }

    fn parse_program(&mut self) -> Program {
        let mut p = Program {
            meta: None,
            globals: Vec::new(),
            functions: Vec::new(),
            entry: "main".into(),
        };
        while let Some(tok) = self.peek() {
            let res: Result<(), Diagnostic> = match tok {
                Tok::Ident(kw) if kw == "global" => {
                    self.parse_global().map(|g| p.globals.push(g))
                }
                Tok::Ident(kw) if kw == "fn" => self.parse_function().map(|f| p.functions.push(f)),
                Tok::Ident(kw) if kw == "transformed" => self.parse_meta().map(|m| p.meta = Some(m)),
                _ => Err(self.err("expected 'global', 'fn', or 'transformed' at top level")),
            };
            if let Err(d) = res {
                self.diags.push(d);
                // skip to the next plausible top-level item
                while let Some(t) = self.peek() {
                    if matches!(t, Tok::Ident(k) if k == "global" || k == "fn") {
                        break;
                    }
                    self.bump();
                }
            }
        }
        p
    }
}

/// Name-resolution pass: every referenced register, label, global, and
/// callee must be defined; definitions must be unique. Runs after the
/// grammar pass so syntax errors surface first.
fn resolve(p: &Program, diags: &mut Vec<Diagnostic>) {
    use std::collections::HashSet;

    let mut global_names: HashSet<&str> = HashSet::new();
    for g in &p.globals {
        if !global_names.insert(&g.name) {
            diags.push(Diagnostic::new(
                DiagKind::DuplicateDefinition,
                g.loc,
                format!("global '@{}' defined twice", g.name),
            ));
        }
    }
    let mut fn_names: HashSet<&str> = HashSet::new();
    for f in &p.functions {
        if !fn_names.insert(&f.name) {
            diags.push(Diagnostic::new(
                DiagKind::DuplicateDefinition,
                f.loc,
                format!("function '@{}' defined twice", f.name),
            ));
        }
    }

    for f in &p.functions {
        let mut regs: HashSet<&str> = HashSet::new();
        for param in &f.params {
            if !regs.insert(&param.name) {
                diags.push(Diagnostic::new(
                    DiagKind::DuplicateDefinition,
                    f.loc,
                    format!("parameter '%{}' defined twice in @{}", param.name, f.name),
                ));
            }
        }
        let mut labels: HashSet<&str> = HashSet::new();
        for b in &f.blocks {
            if !labels.insert(&b.label) {
                diags.push(Diagnostic::new(
                    DiagKind::DuplicateDefinition,
                    b.loc,
                    format!("label '{}' defined twice in @{}", b.label, f.name),
                ));
            }
            for inst in &b.insts {
                if let Some(dst) = inst.kind.dst() {
                    if !regs.insert(dst) {
                        diags.push(Diagnostic::new(
                            DiagKind::DuplicateDefinition,
                            inst.loc,
                            format!("register '%{dst}' defined twice in @{}", f.name),
                        ));
                    }
                }
            }
        }
        // uses
        for b in &f.blocks {
            for inst in &b.insts {
                for op in inst.kind.operands() {
                    match op {
                        Operand::Reg(r) => {
                            if !regs.contains(r.as_str()) {
                                diags.push(Diagnostic::new(
                                    DiagKind::Syntax,
                                    inst.loc,
                                    format!("use of undefined register '%{r}'"),
                                ));
                            }
                        }
                        Operand::Global(g) => {
                            if !global_names.contains(g.as_str()) {
                                diags.push(Diagnostic::new(
                                    DiagKind::UndefinedName,
                                    inst.loc,
                                    format!("use of undefined global '@{g}'"),
                                ));
                            }
                        }
                        Operand::Imm(_) => {}
                    }
                }
                match &inst.kind {
                    InstKind::Br { target } => {
                        if !labels.contains(target.as_str()) {
                            diags.push(Diagnostic::new(
                                DiagKind::UndefinedName,
                                inst.loc,
                                format!("branch to undefined label '{target}'"),
                            ));
                        }
                    }
                    InstKind::CondBr { then_l, else_l, .. } => {
                        for l in [then_l, else_l] {
                            if !labels.contains(l.as_str()) {
                                diags.push(Diagnostic::new(
                                    DiagKind::UndefinedName,
                                    inst.loc,
                                    format!("branch to undefined label '{l}'"),
                                ));
                            }
                        }
                    }
                    InstKind::Call { callee, .. } => {
                        if !fn_names.contains(callee.as_str()) && intrinsic_sig(callee).is_none() {
                            diags.push(Diagnostic::new(
                                DiagKind::UndefinedName,
                                inst.loc,
                                format!("call to undefined function '@{callee}'"),
                            ));
                        }
                    }
                    _ => {}
                }
            }
        }
    }
}

/// Parse IR text into a [`Program`], or report every syntax, duplicate, and
/// undefined-name problem found.
pub fn parse_program(text: &str) -> Result<Program, Vec<Diagnostic>> {
    let toks = match Lexer::new(text).lex() {
        Ok(t) => t,
        Err(d) => return Err(vec![d]),
    };
    let mut parser = Parser { toks, pos: 0, diags: Vec::new() };
    let program = parser.parse_program();
    let mut diags = parser.diags;
    resolve(&program, &mut diags);
    if diags.is_empty() {
        Ok(program)
    } else {
        Err(diags)
    }
}
