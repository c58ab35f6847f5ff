use std::collections::HashMap;

use super::{
    ArithOp, FieldRef, FuncId, Function, Instruction, Op, Operand, Program, ProgramError, Reg,
};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Str(Vec<u8>),
}

fn perr(line: usize, msg: impl Into<String>) -> ProgramError {
    ProgramError::Parse {
        line,
        msg: msg.into(),
    }
}

fn tokenize(line_no: usize, line: &str) -> Result<Vec<Tok>, ProgramError> {
    let mut toks = Vec::new();
    let mut chars = line.chars().peekable();
    let mut word = String::new();
    while let Some(c) = chars.next() {
        match c {
            '#' => break,
            '"' => {
                if !word.is_empty() {
                    return Err(perr(
                        line_no,
                        "string literal must be preceded by whitespace",
                    ));
                }
                let mut bytes = Vec::new();
                loop {
                    match chars.next() {
                        None => return Err(perr(line_no, "unterminated string literal")),
                        Some('"') => break,
                        Some('\\') => match chars.next() {
                            Some('x') => {
                                let hex: String = chars.by_ref().take(2).collect();
                                let b = u8::from_str_radix(&hex, 16)
                                    .map_err(|_| perr(line_no, format!("bad escape \\x{hex}")))?;
                                bytes.push(b);
                            }
                            Some('n') => bytes.push(b'\n'),
                            Some('t') => bytes.push(b'\t'),
                            Some('0') => bytes.push(0),
                            Some('\\') => bytes.push(b'\\'),
                            Some('"') => bytes.push(b'"'),
                            other => return Err(perr(line_no, format!("bad escape {other:?}"))),
                        },
                        Some(ch) => {
                            let mut buf = [0u8; 4];
                            bytes.extend_from_slice(ch.encode_utf8(&mut buf).as_bytes());
                        }
                    }
                }
                toks.push(Tok::Str(bytes));
            }
            c if c.is_whitespace() || c == ',' => {
                if !word.is_empty() {
                    toks.push(Tok::Word(std::mem::take(&mut word)));
                }
            }
            '(' | ')' | '{' | '}' => {
                if !word.is_empty() {
                    toks.push(Tok::Word(std::mem::take(&mut word)));
                }
                toks.push(Tok::Word(c.to_string()));
            }
            c => word.push(c),
        }
    }
    if !word.is_empty() {
        toks.push(Tok::Word(word));
    }
    Ok(toks)
}

fn is_ident(s: &str) -> bool {
    let mut cs = s.chars();
    matches!(cs.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && cs.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub(crate) fn parse_int(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let magnitude = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()?
    } else if body.len() == 3 && body.starts_with('\'') && body.ends_with('\'') {
        body.as_bytes()[1] as u64
    } else {
        if body.is_empty() || !body.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        body.parse::<u64>().ok()?
    };
    let v = magnitude as i64;
    Some(if neg { v.wrapping_neg() } else { v })
}

#[derive(Default)]
struct Regs {
    names: Vec<String>,
    index: HashMap<String, Reg>,
}

impl Regs {
    fn intern(&mut self, line: usize, name: &str) -> Result<Reg, ProgramError> {
        if !is_ident(name) {
            return Err(perr(line, format!("`{name}` is not a register name")));
        }
        if let Some(r) = self.index.get(name) {
            return Ok(*r);
        }
        let r = Reg(self.names.len() as u32);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), r);
        Ok(r)
    }
}

/// Label and callee names awaiting resolution.
struct Pending {
    line: usize,
    label: String,
    op: Op,
    targets: Vec<String>,
    callee: Option<String>,
}

struct RawFunction {
    name: String,
    line: usize,
    params: Vec<Reg>,
    regs: Regs,
    body: Vec<Pending>,
}

struct Cursor<'a> {
    line: usize,
    toks: &'a [Tok],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn word(&mut self, what: &str) -> Result<&'a str, ProgramError> {
        match self.toks.get(self.pos) {
            Some(Tok::Word(w)) => {
                self.pos += 1;
                Ok(w)
            }
            Some(Tok::Str(_)) => Err(perr(
                self.line,
                format!("expected {what}, found string literal"),
            )),
            None => Err(perr(self.line, format!("expected {what}"))),
        }
    }

    fn operand(&mut self, regs: &mut Regs) -> Result<Operand, ProgramError> {
        let w = self.word("operand")?;
        match parse_int(w) {
            Some(v) => Ok(Operand::Imm(v)),
            None => Ok(Operand::Reg(regs.intern(self.line, w)?)),
        }
    }

    fn bytes(&mut self) -> Result<Vec<u8>, ProgramError> {
        match self.toks.get(self.pos) {
            Some(Tok::Str(b)) => {
                self.pos += 1;
                Ok(b.clone())
            }
            _ => Err(perr(self.line, "expected byte-string literal")),
        }
    }

    fn label(&mut self) -> Result<String, ProgramError> {
        let w = self.word("label")?;
        if !is_ident(w) {
            return Err(perr(self.line, format!("`{w}` is not a label")));
        }
        Ok(w.to_string())
    }

    /// Optional trailing `key=value` annotation.
    fn annotation(&mut self, key: &str) -> Result<Option<&'a str>, ProgramError> {
        match self.toks.get(self.pos) {
            Some(Tok::Word(w)) => match w.split_once('=') {
                Some((k, v)) if k == key && !v.is_empty() => {
                    self.pos += 1;
                    Ok(Some(v))
                }
                _ => Err(perr(self.line, format!("unexpected `{w}`"))),
            },
            Some(Tok::Str(_)) => Err(perr(self.line, "unexpected string literal")),
            None => Ok(None),
        }
    }

    fn field(&mut self) -> Result<Option<FieldRef>, ProgramError> {
        let Some(v) = self.annotation("field")? else {
            return Ok(None);
        };
        match v.split_once('.') {
            Some((ty, field)) if is_ident(ty) && is_ident(field) => Ok(Some(FieldRef {
                ty: ty.to_string(),
                field: field.to_string(),
            })),
            _ => Err(perr(self.line, format!("bad field annotation `{v}`"))),
        }
    }

    fn ty(&mut self) -> Result<Option<String>, ProgramError> {
        match self.annotation("type")? {
            Some(t) if is_ident(t) => Ok(Some(t.to_string())),
            Some(t) => Err(perr(self.line, format!("bad type annotation `{t}`"))),
            None => Ok(None),
        }
    }

    fn end(&self) -> Result<(), ProgramError> {
        if self.pos < self.toks.len() {
            return Err(perr(self.line, "trailing tokens"));
        }
        Ok(())
    }
}

fn width_of(line: usize, mnemonic: &str, prefix: &str) -> Result<Option<u8>, ProgramError> {
    let Some(w) = mnemonic.strip_prefix(prefix) else {
        return Ok(None);
    };
    match w {
        "1" => Ok(Some(1)),
        "2" => Ok(Some(2)),
        "4" => Ok(Some(4)),
        "8" => Ok(Some(8)),
        _ => Err(perr(
            line,
            format!("`{mnemonic}`: access width must be 1, 2, 4 or 8"),
        )),
    }
}

fn parse_instruction(line: usize, toks: &[Tok], regs: &mut Regs) -> Result<Pending, ProgramError> {
    let first = match toks.first() {
        Some(Tok::Word(w)) => w,
        _ => return Err(perr(line, "expected `label:`")),
    };
    let (label, mut cur) = match first.strip_suffix(':') {
        Some(l) if is_ident(l) => (l.to_string(), Cursor { line, toks, pos: 1 }),
        Some(l) => return Err(perr(line, format!("`{l}` is not a label"))),
        None => match toks.get(1) {
            Some(Tok::Word(w)) if w == ":" && is_ident(first) => {
                (first.clone(), Cursor { line, toks, pos: 2 })
            }
            _ => return Err(perr(line, "instruction must start with `label:`")),
        },
    };

    // `dst = opcode ...` or `opcode ...`
    let dst = match (toks.get(cur.pos), toks.get(cur.pos + 1)) {
        (Some(Tok::Word(d)), Some(Tok::Word(eq))) if eq == "=" => {
            cur.pos += 2;
            Some(regs.intern(line, d)?)
        }
        _ => None,
    };
    let mnemonic = cur.word("opcode")?;
    let need_dst = |dst: Option<Reg>| {
        dst.ok_or_else(|| perr(line, format!("`{mnemonic}` needs a destination")))
    };
    let no_dst = |dst: Option<Reg>| {
        if dst.is_some() {
            Err(perr(line, format!("`{mnemonic}` does not produce a value")))
        } else {
            Ok(())
        }
    };

    let mut targets = Vec::new();
    let mut callee = None;
    let op = if let Some(op) = ArithOp::from_mnemonic(mnemonic) {
        let dst = need_dst(dst)?;
        let lhs = cur.operand(regs)?;
        let rhs = cur.operand(regs)?;
        Op::Arith { dst, op, lhs, rhs }
    } else if let Some(width) = width_of(line, mnemonic, "store")
        .ok()
        .flatten()
        .filter(|_| mnemonic != "store_bytes")
    {
        no_dst(dst)?;
        let addr = cur.operand(regs)?;
        let value = cur.operand(regs)?;
        let field = cur.field()?;
        Op::Store {
            width,
            addr,
            value,
            field,
        }
    } else if let Some(width) = width_of(line, mnemonic, "load")? {
        let dst = need_dst(dst)?;
        let addr = cur.operand(regs)?;
        let field = cur.field()?;
        Op::Load {
            dst,
            width,
            addr,
            field,
        }
    } else {
        match mnemonic {
            "const" => {
                let dst = need_dst(dst)?;
                let w = cur.word("immediate")?;
                let value =
                    parse_int(w).ok_or_else(|| perr(line, format!("`{w}` is not an integer")))?;
                Op::Const { dst, value }
            }
            "br" => {
                no_dst(dst)?;
                let cond = cur.operand(regs)?;
                targets.push(cur.label()?);
                targets.push(cur.label()?);
                Op::Br {
                    cond,
                    then_pc: 0,
                    else_pc: 0,
                }
            }
            "jmp" => {
                no_dst(dst)?;
                targets.push(cur.label()?);
                Op::Jmp { target: 0 }
            }
            "call" => {
                let name = cur.word("function name")?;
                if !is_ident(name) {
                    return Err(perr(line, format!("`{name}` is not a function name")));
                }
                callee = Some(name.to_string());
                let mut args = Vec::new();
                while cur.pos < toks.len() {
                    args.push(cur.operand(regs)?);
                }
                Op::Call {
                    dst,
                    callee: FuncId(0),
                    args,
                }
            }
            "ret" => {
                no_dst(dst)?;
                let value = if cur.pos < toks.len() {
                    Some(cur.operand(regs)?)
                } else {
                    None
                };
                Op::Ret { value }
            }
            "alloc" => {
                let dst = need_dst(dst)?;
                let size = cur.operand(regs)?;
                let ty = cur.ty()?;
                Op::Alloc { dst, size, ty }
            }
            "calloc" => {
                let dst = need_dst(dst)?;
                let count = cur.operand(regs)?;
                let size = cur.operand(regs)?;
                let ty = cur.ty()?;
                Op::Calloc {
                    dst,
                    count,
                    size,
                    ty,
                }
            }
            "realloc" => {
                let dst = need_dst(dst)?;
                let ptr = cur.operand(regs)?;
                let size = cur.operand(regs)?;
                Op::Realloc { dst, ptr, size }
            }
            "free" => {
                no_dst(dst)?;
                Op::Free {
                    ptr: cur.operand(regs)?,
                }
            }
            "store_bytes" => {
                no_dst(dst)?;
                let addr = cur.operand(regs)?;
                let bytes = cur.bytes()?;
                let field = cur.field()?;
                Op::StoreBytes { addr, bytes, field }
            }
            "input" => Op::Input {
                dst: need_dst(dst)?,
            },
            "toggle_sensitive" => {
                no_dst(dst)?;
                let on = match cur.word("on/off")? {
                    "on" | "1" => true,
                    "off" | "0" => false,
                    other => {
                        return Err(perr(
                            line,
                            format!("toggle_sensitive expects on/off, got `{other}`"),
                        ))
                    }
                };
                Op::ToggleSensitive { on }
            }
            "print" => {
                no_dst(dst)?;
                Op::Print {
                    value: cur.operand(regs)?,
                }
            }
            "halt" => {
                no_dst(dst)?;
                Op::Halt
            }
            other if other.starts_with("store") => {
                width_of(line, other, "store")?;
                return Err(perr(line, format!("unknown opcode `{other}`")));
            }
            other => return Err(perr(line, format!("unknown opcode `{other}`"))),
        }
    };
    cur.end()?;
    Ok(Pending {
        line,
        label,
        op,
        targets,
        callee,
    })
}

fn parse_header(line: usize, toks: &[Tok]) -> Result<(String, Vec<String>), ProgramError> {
    let words: Vec<&str> = toks
        .iter()
        .map(|t| match t {
            Tok::Word(w) => Ok(w.as_str()),
            Tok::Str(_) => Err(perr(line, "unexpected string literal in function header")),
        })
        .collect::<Result<_, _>>()?;
    let name = match words.get(1) {
        Some(n) if is_ident(n) => n.to_string(),
        _ => return Err(perr(line, "expected function name after `fn`")),
    };
    let mut params = Vec::new();
    let mut i = 2;
    if words.get(i) == Some(&"(") {
        i += 1;
        loop {
            match words.get(i) {
                Some(&")") => {
                    i += 1;
                    break;
                }
                Some(p) if is_ident(p) => {
                    params.push(p.to_string());
                    i += 1;
                }
                _ => return Err(perr(line, "malformed parameter list")),
            }
        }
    }
    if words.get(i) != Some(&"{") || i + 1 != words.len() {
        return Err(perr(line, "expected `{` at end of function header"));
    }
    Ok((name, params))
}

/// Parses and validates a program.
pub fn parse_program(text: &str) -> Result<Program, ProgramError> {
    let mut raw: Vec<RawFunction> = Vec::new();
    let mut current: Option<RawFunction> = None;

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let toks = tokenize(line_no, line)?;
        if toks.is_empty() {
            continue;
        }
        match &toks[0] {
            Tok::Word(w) if w == "fn" => {
                if current.is_some() {
                    return Err(perr(line_no, "nested function definition"));
                }
                let (name, param_names) = parse_header(line_no, &toks)?;
                let mut regs = Regs::default();
                let mut params = Vec::new();
                for p in &param_names {
                    let r = regs.intern(line_no, p)?;
                    if params.contains(&r) {
                        return Err(perr(line_no, format!("duplicate parameter `{p}`")));
                    }
                    params.push(r);
                }
                current = Some(RawFunction {
                    name,
                    line: line_no,
                    params,
                    regs,
                    body: Vec::new(),
                });
            }
            Tok::Word(w) if w == "}" => {
                if toks.len() != 1 {
                    return Err(perr(line_no, "trailing tokens after `}`"));
                }
                let func = current
                    .take()
                    .ok_or_else(|| perr(line_no, "unmatched `}`"))?;
                raw.push(func);
            }
            _ => {
                let func = current
                    .as_mut()
                    .ok_or_else(|| perr(line_no, "instruction outside of a function"))?;
                let pending = parse_instruction(line_no, &toks, &mut func.regs)?;
                if func.body.iter().any(|p| p.label == pending.label) {
                    return Err(perr(
                        line_no,
                        format!("duplicate label `{}`", pending.label),
                    ));
                }
                func.body.push(pending);
            }
        }
    }
    if let Some(func) = current {
        return Err(perr(
            func.line,
            format!("function `{}` is not closed", func.name),
        ));
    }
    if raw.is_empty() {
        return Err(perr(1, "program contains no functions"));
    }
    link(raw)
}

fn link(raw: Vec<RawFunction>) -> Result<Program, ProgramError> {
    let mut ids: HashMap<String, (FuncId, usize)> = HashMap::new();
    for (i, f) in raw.iter().enumerate() {
        if ids
            .insert(f.name.clone(), (FuncId(i as u32), f.params.len()))
            .is_some()
        {
            return Err(perr(f.line, format!("duplicate function `{}`", f.name)));
        }
    }
    let main = match ids.get("main") {
        Some((id, 0)) => *id,
        Some(_) => {
            return Err(ProgramError::Validation(
                "`main` takes no parameters".into(),
            ))
        }
        None => return Err(ProgramError::Validation("no `main` function".into())),
    };

    let mut functions = Vec::with_capacity(raw.len());
    for f in raw {
        if f.body.is_empty() {
            return Err(ProgramError::Validation(format!(
                "function `{}` is empty",
                f.name
            )));
        }
        let pcs: HashMap<&str, usize> = f
            .body
            .iter()
            .enumerate()
            .map(|(pc, p)| (p.label.as_str(), pc))
            .collect();
        let mut body = Vec::with_capacity(f.body.len());
        for p in &f.body {
            let resolve = |l: &String| {
                pcs.get(l.as_str())
                    .copied()
                    .ok_or_else(|| ProgramError::Link {
                        line: p.line,
                        msg: format!("unknown label `{l}` in `{}`", f.name),
                    })
            };
            let mut op = p.op.clone();
            match &mut op {
                Op::Br {
                    then_pc, else_pc, ..
                } => {
                    *then_pc = resolve(&p.targets[0])?;
                    *else_pc = resolve(&p.targets[1])?;
                }
                Op::Jmp { target } => *target = resolve(&p.targets[0])?,
                Op::Call { callee, args, .. } => {
                    let name = p.callee.as_ref().expect("call has a callee");
                    let (id, arity) = ids.get(name).copied().ok_or_else(|| ProgramError::Link {
                        line: p.line,
                        msg: format!("call to unknown function `{name}`"),
                    })?;
                    if id == main {
                        return Err(ProgramError::Link {
                            line: p.line,
                            msg: "`main` cannot be called".into(),
                        });
                    }
                    if arity != args.len() {
                        return Err(ProgramError::Link {
                            line: p.line,
                            msg: format!(
                                "`{name}` takes {arity} argument(s), {} given",
                                args.len()
                            ),
                        });
                    }
                    *callee = id;
                }
                _ => {}
            }
            body.push(Instruction {
                label: p.label.clone(),
                op,
            });
        }
        match body.last().map(|i| &i.op) {
            Some(Op::Ret { .. } | Op::Halt | Op::Jmp { .. } | Op::Br { .. }) => {}
            _ => {
                return Err(ProgramError::Validation(format!(
                    "function `{}` falls off its end",
                    f.name
                )))
            }
        }
        let func = Function::new(f.name, f.params, f.regs.names, body);
        if let Some(pc) = func.cfg().reaches_exit().iter().position(|r| !r) {
            return Err(ProgramError::Validation(format!(
                "`{}:{}` cannot reach a return",
                func.name, func.body[pc].label
            )));
        }
        functions.push(func);
    }
    Ok(Program { functions, main })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers() {
        assert_eq!(parse_int("128"), Some(128));
        assert_eq!(parse_int("-800"), Some(-800));
        assert_eq!(parse_int("0x41"), Some(0x41));
        assert_eq!(parse_int("'A'"), Some(65));
        assert_eq!(parse_int("0xffffffffffffffff"), Some(-1));
        assert_eq!(parse_int("abc"), None);
        assert_eq!(parse_int("-"), None);
    }

    #[test]
    fn empty_text_is_parse_error() {
        assert!(matches!(parse_program(""), Err(ProgramError::Parse { .. })));
        assert!(matches!(
            parse_program("# nothing\n"),
            Err(ProgramError::Parse { .. })
        ));
    }

    #[test]
    fn missing_label_is_link_error() {
        let err = parse_program("fn main {\n L0: jmp Lmissing\n}\n").unwrap_err();
        assert_eq!(
            err,
            ProgramError::Link {
                line: 2,
                msg: "unknown label `Lmissing` in `main`".into()
            }
        );
    }

    #[test]
    fn unknown_callee_and_arity() {
        assert!(matches!(
            parse_program("fn main {\n L0: call nope\n L1: halt\n}\n"),
            Err(ProgramError::Link { line: 2, .. })
        ));
        let text = "fn f(a) {\n L0: ret a\n}\nfn main {\n L0: x = call f 1 2\n L1: halt\n}\n";
        assert!(matches!(
            parse_program(text),
            Err(ProgramError::Link { line: 5, .. })
        ));
    }

    #[test]
    fn infinite_loop_rejected() {
        let text = "fn main {\n L0: jmp L1\n L1: jmp L0\n L2: halt\n}\n";
        assert!(matches!(
            parse_program(text),
            Err(ProgramError::Validation(_))
        ));
        let text = "fn main {\n L0: x = const 1\n}\n";
        assert!(matches!(
            parse_program(text),
            Err(ProgramError::Validation(_))
        ));
    }

    #[test]
    fn syntax_errors_carry_line() {
        let cases = [
            "fn main {\n L0: x = const\n L1: halt\n}\n",
            "fn main {\n L0: store3 x 1\n L1: halt\n}\n",
            "fn main {\n L0: x = frob 1\n L1: halt\n}\n",
            "fn main {\n L0: halt\n L0: halt\n}\n",
            "fn main {\n L0: store_bytes p \"abc\n L1: halt\n}\n",
            "fn main {\n L0: p = alloc 8 colour=red\n L1: halt\n}\n",
        ];
        for text in cases {
            match parse_program(text) {
                Err(ProgramError::Parse { line: 2, .. })
                | Err(ProgramError::Parse { line: 3, .. }) => {}
                other => panic!("{text:?} -> {other:?}"),
            }
        }
    }

    #[test]
    fn parses_all_opcodes() {
        let text = r#"
fn main {
  L0: toggle_sensitive on
  L1: p = alloc 16 type=goaty
  L2: q = calloc 2 8
  L3: r = realloc q 64
  L4: n = input
  L5: s = add n 1
  L6: store4 p s field=goaty.name
  L7: v = load4 p
  L8: store_bytes r "ab\x00\"" field=goaty.name
  L9: c = cmp_lt v 3
  L10: br c L11 L12
  L11: x = call twice v
  L12: print v
  L13: free p
  L14: halt
}
fn twice(a) {
  L0: b = mul a 2
  L1: ret b
}
"#;
        let prog = parse_program(text).unwrap();
        assert_eq!(prog.functions().len(), 2);
        let main = prog.function(prog.main());
        assert_eq!(main.body.len(), 15);
        match &main.body[8].op {
            Op::StoreBytes { bytes, field, .. } => {
                assert_eq!(bytes, b"ab\x00\"");
                assert_eq!(field.as_ref().unwrap().field, "name");
            }
            other => panic!("{other:?}"),
        }
        let again = parse_program(&prog.to_string()).unwrap();
        assert_eq!(again, prog);
    }
}
