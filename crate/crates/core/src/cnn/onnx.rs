//! Minimal reader for the ONNX interchange format.
//!
//! Decodes just enough of the protobuf wire format to recover the graph:
//! node list (op type, inputs, outputs, attributes), initializer tensors,
//! and the declared graph inputs/outputs. Unknown fields are skipped, so
//! models from any exporter load as long as the message layout follows
//! the published schema.

use std::fmt;

#[derive(Debug)]
pub struct OnnxError(String);

impl fmt::Display for OnnxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "onnx parse error: {}", self.0)
    }
}

impl std::error::Error for OnnxError {}

fn err<T>(msg: impl Into<String>) -> Result<T, OnnxError> {
    Err(OnnxError(msg.into()))
}

/// Tensor constant stored in the model (weights, biases).
#[derive(Debug, Clone)]
pub struct TensorData {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct Attribute {
    pub name: String,
    pub i: Option<i64>,
    pub f: Option<f32>,
    pub s: Option<Vec<u8>>,
    pub ints: Vec<i64>,
    pub floats: Vec<f32>,
    pub tensor: Option<TensorData>,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op_type: String,
    pub name: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub attributes: Vec<Attribute>,
}

impl Node {
    pub fn attr(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn attr_ints(&self, name: &str) -> Option<Vec<i64>> {
        self.attr(name).map(|a| a.ints.clone())
    }

    pub fn attr_i(&self, name: &str) -> Option<i64> {
        self.attr(name).and_then(|a| a.i)
    }

    pub fn attr_string(&self, name: &str) -> Option<String> {
        self.attr(name)
            .and_then(|a| a.s.as_ref())
            .map(|b| String::from_utf8_lossy(b).into_owned())
    }
}

/// Declared graph input/output with its static shape where known.
#[derive(Debug, Clone)]
pub struct ValueInfo {
    pub name: String,
    /// Dimensions; 0 marks a symbolic/unknown dimension (e.g. batch).
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub initializers: Vec<TensorData>,
    pub inputs: Vec<ValueInfo>,
    pub outputs: Vec<ValueInfo>,
}

pub fn parse_model(bytes: &[u8]) -> Result<Graph, OnnxError> {
    let mut reader = Reader::new(bytes);
    let mut graph = None;
    while let Some((field, wire)) = reader.next_key()? {
        match (field, wire) {
            // ModelProto.graph
            (7, Wire::Len) => {
                let slice = reader.read_len_slice()?;
                graph = Some(parse_graph(slice)?);
            }
            _ => reader.skip(wire)?,
        }
    }
    graph.ok_or_else(|| OnnxError("model has no graph".into()))
}

fn parse_graph(bytes: &[u8]) -> Result<Graph, OnnxError> {
    let mut reader = Reader::new(bytes);
    let mut graph = Graph {
        nodes: Vec::new(),
        initializers: Vec::new(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    while let Some((field, wire)) = reader.next_key()? {
        match (field, wire) {
            (1, Wire::Len) => graph.nodes.push(parse_node(reader.read_len_slice()?)?),
            (5, Wire::Len) => graph
                .initializers
                .push(parse_tensor(reader.read_len_slice()?)?),
            (11, Wire::Len) => graph.inputs.push(parse_value_info(reader.read_len_slice()?)?),
            (12, Wire::Len) => graph
                .outputs
                .push(parse_value_info(reader.read_len_slice()?)?),
            _ => reader.skip(wire)?,
        }
    }
    Ok(graph)
}

fn parse_node(bytes: &[u8]) -> Result<Node, OnnxError> {
    let mut reader = Reader::new(bytes);
    let mut node = Node {
        op_type: String::new(),
        name: String::new(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        attributes: Vec::new(),
    };
    while let Some((field, wire)) = reader.next_key()? {
        match (field, wire) {
            (1, Wire::Len) => node.inputs.push(reader.read_string()?),
            (2, Wire::Len) => node.outputs.push(reader.read_string()?),
            (3, Wire::Len) => node.name = reader.read_string()?,
            (4, Wire::Len) => node.op_type = reader.read_string()?,
            (5, Wire::Len) => node
                .attributes
                .push(parse_attribute(reader.read_len_slice()?)?),
            _ => reader.skip(wire)?,
        }
    }
    Ok(node)
}

fn parse_attribute(bytes: &[u8]) -> Result<Attribute, OnnxError> {
    let mut reader = Reader::new(bytes);
    let mut attr = Attribute::default();
    while let Some((field, wire)) = reader.next_key()? {
        match (field, wire) {
            (1, Wire::Len) => attr.name = reader.read_string()?,
            (2, Wire::Fixed32) => attr.f = Some(f32::from_bits(reader.read_fixed32()?)),
            (3, Wire::Varint) => attr.i = Some(reader.read_varint()? as i64),
            (4, Wire::Len) => attr.s = Some(reader.read_len_slice()?.to_vec()),
            (5, Wire::Len) => attr.tensor = Some(parse_tensor(reader.read_len_slice()?)?),
            // repeated floats: packed or one element per tag
            (7, Wire::Len) => {
                let slice = reader.read_len_slice()?;
                for chunk in slice.chunks_exact(4) {
                    attr.floats
                        .push(f32::from_le_bytes(chunk.try_into().unwrap()));
                }
            }
            (7, Wire::Fixed32) => attr.f32_push(reader.read_fixed32()?),
            // repeated ints: packed or one element per tag
            (8, Wire::Len) => {
                let slice = reader.read_len_slice()?;
                let mut sub = Reader::new(slice);
                while !sub.at_end() {
                    attr.ints.push(sub.read_varint()? as i64);
                }
            }
            (8, Wire::Varint) => attr.ints.push(reader.read_varint()? as i64),
            _ => reader.skip(wire)?,
        }
    }
    Ok(attr)
}

impl Attribute {
    fn f32_push(&mut self, bits: u32) {
        self.floats.push(f32::from_bits(bits));
    }
}

// TensorProto data_type values we accept.
const DT_FLOAT: u64 = 1;
const DT_INT64: u64 = 7;
const DT_DOUBLE: u64 = 11;

fn parse_tensor(bytes: &[u8]) -> Result<TensorData, OnnxError> {
    let mut reader = Reader::new(bytes);
    let mut name = String::new();
    let mut dims: Vec<usize> = Vec::new();
    let mut data_type = DT_FLOAT;
    let mut floats: Vec<f32> = Vec::new();
    let mut int64s: Vec<i64> = Vec::new();
    let mut raw: Option<Vec<u8>> = None;
    while let Some((field, wire)) = reader.next_key()? {
        match (field, wire) {
            (1, Wire::Varint) => dims.push(reader.read_varint()? as usize),
            (1, Wire::Len) => {
                let slice = reader.read_len_slice()?;
                let mut sub = Reader::new(slice);
                while !sub.at_end() {
                    dims.push(sub.read_varint()? as usize);
                }
            }
            (2, Wire::Varint) => data_type = reader.read_varint()?,
            (4, Wire::Len) => {
                let slice = reader.read_len_slice()?;
                for chunk in slice.chunks_exact(4) {
                    floats.push(f32::from_le_bytes(chunk.try_into().unwrap()));
                }
            }
            (4, Wire::Fixed32) => floats.push(f32::from_bits(reader.read_fixed32()?)),
            (7, Wire::Len) => {
                let slice = reader.read_len_slice()?;
                let mut sub = Reader::new(slice);
                while !sub.at_end() {
                    int64s.push(sub.read_varint()? as i64);
                }
            }
            (7, Wire::Varint) => int64s.push(reader.read_varint()? as i64),
            (8, Wire::Len) => name = reader.read_string()?,
            (9, Wire::Len) => raw = Some(reader.read_len_slice()?.to_vec()),
            _ => reader.skip(wire)?,
        }
    }

    let expected: usize = dims.iter().product::<usize>().max(1);
    let values: Vec<f32> = if let Some(raw) = raw {
        match data_type {
            DT_FLOAT => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DT_INT64 => raw
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect(),
            DT_DOUBLE => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect(),
            other => return err(format!("unsupported tensor data type {other}")),
        }
    } else if !floats.is_empty() {
        floats
    } else if !int64s.is_empty() {
        int64s.into_iter().map(|v| v as f32).collect()
    } else if expected == 0 {
        Vec::new()
    } else {
        return err(format!("tensor {name:?} has no data"));
    };

    if !dims.is_empty() && values.len() != dims.iter().product::<usize>() {
        return err(format!(
            "tensor {name:?}: {} values but dims {:?}",
            values.len(),
            dims
        ));
    }
    Ok(TensorData { name, dims, values })
}

fn parse_value_info(bytes: &[u8]) -> Result<ValueInfo, OnnxError> {
    let mut reader = Reader::new(bytes);
    let mut name = String::new();
    let mut dims = Vec::new();
    while let Some((field, wire)) = reader.next_key()? {
        match (field, wire) {
            (1, Wire::Len) => name = reader.read_string()?,
            (2, Wire::Len) => dims = parse_type_dims(reader.read_len_slice()?)?,
            _ => reader.skip(wire)?,
        }
    }
    Ok(ValueInfo { name, dims })
}

// TypeProto.tensor_type (1) -> TensorTypeProto.shape (2) -> dim (1) ->
// dim_value (1) | dim_param (2, symbolic -> 0)
fn parse_type_dims(bytes: &[u8]) -> Result<Vec<usize>, OnnxError> {
    let mut reader = Reader::new(bytes);
    while let Some((field, wire)) = reader.next_key()? {
        if field == 1 && wire == Wire::Len {
            let tensor_type = reader.read_len_slice()?;
            let mut tt = Reader::new(tensor_type);
            while let Some((f2, w2)) = tt.next_key()? {
                if f2 == 2 && w2 == Wire::Len {
                    return parse_shape_dims(tt.read_len_slice()?);
                }
                tt.skip(w2)?;
            }
            return Ok(Vec::new());
        }
        reader.skip(wire)?;
    }
    Ok(Vec::new())
}

fn parse_shape_dims(bytes: &[u8]) -> Result<Vec<usize>, OnnxError> {
    let mut reader = Reader::new(bytes);
    let mut dims = Vec::new();
    while let Some((field, wire)) = reader.next_key()? {
        if field == 1 && wire == Wire::Len {
            let dim_slice = reader.read_len_slice()?;
            let mut dim = Reader::new(dim_slice);
            let mut value = 0usize;
            while let Some((f2, w2)) = dim.next_key()? {
                if f2 == 1 && w2 == Wire::Varint {
                    value = dim.read_varint()? as usize;
                } else {
                    dim.skip(w2)?;
                }
            }
            dims.push(value);
        } else {
            reader.skip(wire)?;
        }
    }
    Ok(dims)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Wire {
    Varint,
    Fixed64,
    Len,
    Fixed32,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn next_key(&mut self) -> Result<Option<(u64, Wire)>, OnnxError> {
        if self.at_end() {
            return Ok(None);
        }
        let key = self.read_varint()?;
        let field = key >> 3;
        let wire = match key & 7 {
            0 => Wire::Varint,
            1 => Wire::Fixed64,
            2 => Wire::Len,
            5 => Wire::Fixed32,
            other => return err(format!("unsupported wire type {other}")),
        };
        Ok(Some((field, wire)))
    }

    fn read_varint(&mut self) -> Result<u64, OnnxError> {
        let mut value: u64 = 0;
        let mut shift = 0u32;
        loop {
            let byte = *self
                .bytes
                .get(self.pos)
                .ok_or_else(|| OnnxError("truncated varint".into()))?;
            self.pos += 1;
            value |= u64::from(byte & 0x7f) << shift;
            if byte & 0x80 == 0 {
                return Ok(value);
            }
            shift += 7;
            if shift >= 64 {
                return err("varint too long");
            }
        }
    }

    fn read_fixed32(&mut self) -> Result<u32, OnnxError> {
        let end = self.pos + 4;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| OnnxError("truncated fixed32".into()))?;
        self.pos = end;
        Ok(u32::from_le_bytes(slice.try_into().unwrap()))
    }

    fn read_len_slice(&mut self) -> Result<&'a [u8], OnnxError> {
        let len = self.read_varint()? as usize;
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| OnnxError("length-delimited field overruns buffer".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn read_string(&mut self) -> Result<String, OnnxError> {
        let slice = self.read_len_slice()?;
        Ok(String::from_utf8_lossy(slice).into_owned())
    }

    fn skip(&mut self, wire: Wire) -> Result<(), OnnxError> {
        match wire {
            Wire::Varint => {
                self.read_varint()?;
            }
            Wire::Fixed64 => {
                let end = self.pos + 8;
                if end > self.bytes.len() {
                    return err("truncated fixed64");
                }
                self.pos = end;
            }
            Wire::Len => {
                self.read_len_slice()?;
            }
            Wire::Fixed32 => {
                self.read_fixed32()?;
            }
        }
        Ok(())
    }
}
