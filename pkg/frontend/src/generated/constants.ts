// generated by scripts/generate-constants.mjs — do not edit
export default {
 "keyNames": [
  "forward",
  "back",
  "left",
  "right",
  "jump"
 ],
 "yawBinOffset": 5,
 "pitchBinOffset": 14,
 "nActionBits": 23,
 "mouseBins": [
  -0.2,
  -0.15000000000000002,
  -0.1,
  -0.04999999999999999,
  0.0,
  0.04999999999999999,
  0.10000000000000003,
  0.15000000000000002,
  0.2
 ],
 "palette": [
  {
   "id": 0,
   "name": "air",
   "rgb": [
    0.0,
    0.0,
    0.0
   ]
  },
  {
   "id": 1,
   "name": "grass",
   "rgb": [
    0.13,
    0.55,
    0.13
   ]
  },
  {
   "id": 2,
   "name": "dirt",
   "rgb": [
    0.55,
    0.27,
    0.07
   ]
  },
  {
   "id": 3,
   "name": "stone",
   "rgb": [
    0.5,
    0.5,
    0.5
   ]
  },
  {
   "id": 4,
   "name": "sand",
   "rgb": [
    0.76,
    0.7,
    0.5
   ]
  },
  {
   "id": 5,
   "name": "water",
   "rgb": [
    0.2,
    0.4,
    0.8
   ]
  },
  {
   "id": 6,
   "name": "wood",
   "rgb": [
    0.4,
    0.26,
    0.13
   ]
  },
  {
   "id": 7,
   "name": "leaves",
   "rgb": [
    0.13,
    0.4,
    0.13
   ]
  }
 ]
} as const;
