/**
 * Board state: a pure fold over the ordered list of launch/complete/fail
 * events. Cards are immutable once done; late or duplicate events are
 * dropped rather than mutating finished cards.
 */

import type { ScenarioRequest, ScenarioResponse } from "./types.js";

export type CardStatus = "pending" | "done" | "error";

export interface ScenarioCard {
  label: string;
  request: ScenarioRequest;
  status: CardStatus;
  response?: ScenarioResponse;
  error?: string;
}

export type BoardEvent =
  | { kind: "launched"; request: ScenarioRequest }
  | { kind: "completed"; label: string; response: ScenarioResponse }
  | { kind: "failed"; label: string; message: string };

export interface BoardState {
  cards: ScenarioCard[];
}

export const emptyBoard: BoardState = { cards: [] };

function sortCards(cards: ScenarioCard[]): ScenarioCard[] {
  return [...cards].sort((a, b) => {
    if (a.request.cost_reduction !== b.request.cost_reduction) {
      return a.request.cost_reduction - b.request.cost_reduction;
    }
    return a.label.localeCompare(b.label);
  });
}

export function reduceBoard(state: BoardState, event: BoardEvent): BoardState {
  switch (event.kind) {
    case "launched": {
      if (state.cards.some((c) => c.label === event.request.label)) {
        return state; // labels are unique per board
      }
      const card: ScenarioCard = {
        label: event.request.label,
        request: event.request,
        status: "pending",
      };
      return { cards: sortCards([...state.cards, card]) };
    }
    case "completed": {
      return {
        cards: state.cards.map((c) =>
          c.label === event.label && c.status === "pending"
            ? { ...c, status: "done" as CardStatus, response: event.response }
            : c
        ),
      };
    }
    case "failed": {
      return {
        cards: state.cards.map((c) =>
          c.label === event.label && c.status === "pending"
            ? { ...c, status: "error" as CardStatus, error: event.message }
            : c
        ),
      };
    }
  }
}

export function buildBoard(events: BoardEvent[]): BoardState {
  return events.reduce(reduceBoard, emptyBoard);
}

/** The reference card: smallest cost reduction among completed runs. */
export function referenceCard(state: BoardState): ScenarioCard | null {
  const done = state.cards.filter((c) => c.status === "done");
  return done.length > 0 ? done[0] : null;
}
