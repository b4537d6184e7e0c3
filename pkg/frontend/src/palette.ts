// Keyboard palette: digits 1-9 then 0, then letters, in manifest class order.
// Backspace is reserved for undo and never maps to a class.

export const UNDO_KEY = "Backspace";

const DIGITS = ["1", "2", "3", "4", "5", "6", "7", "8", "9", "0"];
const LETTERS = "abcdefghijklmnopqrstuvwxyz".split("");

export interface PaletteEntry {
  key: string;
  classId: number;
  className: string;
}

export function buildPalette(classNames: string[]): PaletteEntry[] {
  const keys = [...DIGITS, ...LETTERS];
  if (classNames.length > keys.length) {
    throw new Error(`palette supports at most ${keys.length} classes`);
  }
  return classNames.map((name, i) => ({
    key: keys[i],
    classId: i,
    className: name,
  }));
}

export function classForKey(palette: PaletteEntry[], key: string): number | null {
  const entry = palette.find((e) => e.key === key.toLowerCase());
  return entry ? entry.classId : null;
}
