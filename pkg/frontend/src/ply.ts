// Minimal binary little-endian PLY reader for the server's part meshes:
// float32 x/y/z, optional uchar red/green/blue, uchar-count int32 triangles.

export interface PlyMesh {
  positions: Float32Array;       // 3 per vertex
  colors: Float32Array | null;   // 3 per vertex in [0, 1]
  indices: Uint32Array;          // 3 per face
}

export function parsePly(buffer: ArrayBuffer): PlyMesh {
  const bytes = new Uint8Array(buffer);
  const headerEnd = findHeaderEnd(bytes);
  const header = new TextDecoder("ascii").decode(bytes.subarray(0, headerEnd));

  let nVerts = 0;
  let nFaces = 0;
  let hasColor = false;
  for (const line of header.split("\n")) {
    if (line.startsWith("element vertex")) nVerts = parseInt(line.split(/\s+/)[2], 10);
    else if (line.startsWith("element face")) nFaces = parseInt(line.split(/\s+/)[2], 10);
    else if (line.trim() === "property uchar red") hasColor = true;
    else if (line.startsWith("format") && !line.includes("binary_little_endian")) {
      throw new Error("only binary little-endian PLY is supported");
    }
  }

  const dv = new DataView(buffer);
  const stride = 12 + (hasColor ? 3 : 0);
  const positions = new Float32Array(nVerts * 3);
  const colors = hasColor ? new Float32Array(nVerts * 3) : null;
  let off = headerEnd;
  for (let i = 0; i < nVerts; i++) {
    positions[3 * i] = dv.getFloat32(off, true);
    positions[3 * i + 1] = dv.getFloat32(off + 4, true);
    positions[3 * i + 2] = dv.getFloat32(off + 8, true);
    if (colors) {
      colors[3 * i] = bytes[off + 12] / 255;
      colors[3 * i + 1] = bytes[off + 13] / 255;
      colors[3 * i + 2] = bytes[off + 14] / 255;
    }
    off += stride;
  }

  const indices = new Uint32Array(nFaces * 3);
  for (let i = 0; i < nFaces; i++) {
    const count = bytes[off];
    if (count !== 3) throw new Error(`non-triangle face with ${count} vertices`);
    indices[3 * i] = dv.getUint32(off + 1, true);
    indices[3 * i + 1] = dv.getUint32(off + 5, true);
    indices[3 * i + 2] = dv.getUint32(off + 9, true);
    off += 13;
  }
  return { positions, colors, indices };
}

function findHeaderEnd(bytes: Uint8Array): number {
  const marker = "end_header\n";
  const probe = new TextDecoder("ascii").decode(bytes.subarray(0, Math.min(bytes.length, 4096)));
  const idx = probe.indexOf(marker);
  if (idx < 0) throw new Error("PLY header terminator not found");
  return idx + marker.length;
}
