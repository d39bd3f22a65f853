/** Standard base64 for raw bytes, identical in browser and node. */
const ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
const REVERSE = {};
for (let i = 0; i < ALPHABET.length; i++) {
    REVERSE[ALPHABET[i]] = i;
}
export function bytesToBase64(bytes) {
    let out = "";
    for (let i = 0; i < bytes.length; i += 3) {
        const a = bytes[i];
        const b = i + 1 < bytes.length ? bytes[i + 1] : 0;
        const c = i + 2 < bytes.length ? bytes[i + 2] : 0;
        out += ALPHABET[a >> 2];
        out += ALPHABET[((a & 0x03) << 4) | (b >> 4)];
        out += i + 1 < bytes.length ? ALPHABET[((b & 0x0f) << 2) | (c >> 6)] : "=";
        out += i + 2 < bytes.length ? ALPHABET[c & 0x3f] : "=";
    }
    return out;
}
export function base64ToBytes(text) {
    if (text.length % 4 !== 0) {
        throw new Error(`bad base64 length ${text.length}`);
    }
    const stripped = text.endsWith("==")
        ? text.slice(0, -2)
        : text.endsWith("=")
            ? text.slice(0, -1)
            : text;
    const out = new Uint8Array(Math.floor((stripped.length * 3) / 4));
    let acc = 0;
    let bits = 0;
    let n = 0;
    for (const ch of stripped) {
        const v = REVERSE[ch];
        if (v === undefined) {
            throw new Error(`bad base64 character ${JSON.stringify(ch)}`);
        }
        acc = (acc << 6) | v;
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out[n++] = (acc >> bits) & 0xff;
        }
    }
    return out;
}
export function utf8ToBase64(text) {
    return bytesToBase64(new TextEncoder().encode(text));
}
export function base64ToUtf8(b64) {
    return new TextDecoder().decode(base64ToBytes(b64));
}
