/** Deterministic stand-in portraits for ranked candidates.
 *
 * There is no imagery at this scale, so each object id gets a stable little
 * SVG figure: same id, same picture, across sessions and machines.
 */
function hash32(text) {
    let h = 0x811c9dc5;
    for (let i = 0; i < text.length; i++) {
        h ^= text.charCodeAt(i);
        h = Math.imul(h, 0x01000193) >>> 0;
    }
    return h >>> 0;
}
export function candidateGlyph(objectId) {
    const h = hash32(`object:${objectId}`);
    const hue = h % 360;
    const skin = (h >> 9) % 360;
    const wide = 18 + ((h >> 17) % 10);
    return (`<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 64 80" width="64" height="80">` +
        `<rect width="64" height="80" fill="hsl(${hue},35%,88%)"/>` +
        `<circle cx="32" cy="26" r="12" fill="hsl(${skin},45%,70%)"/>` +
        `<rect x="${32 - wide / 2}" y="40" width="${wide}" height="32" rx="6" fill="hsl(${hue},55%,45%)"/>` +
        `<text x="32" y="76" font-size="9" text-anchor="middle" fill="#333">#${objectId}</text>` +
        `</svg>`);
}
export function glyphDataUri(objectId) {
    return "data:image/svg+xml;utf8," + encodeURIComponent(candidateGlyph(objectId));
}
