/** Wire types shared with the gateway's JSON surface. */
export {};
